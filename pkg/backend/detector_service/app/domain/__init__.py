# Domain layer - tensors, layers, losses and metrics
