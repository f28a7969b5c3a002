# Tests package for cmlrain
