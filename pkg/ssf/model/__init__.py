# Model package
