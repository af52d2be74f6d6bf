# Shared utilities: errors, tensor file codec, result formats
