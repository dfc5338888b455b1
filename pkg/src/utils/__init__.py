# Utils module for environment variable handling
