# Application layer - model zoo, pipeline, training and experiment services
