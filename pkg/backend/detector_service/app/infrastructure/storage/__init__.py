# Infrastructure - Filesystem storage layer
