# Infrastructure layer - logging and file storage
