# SplatMap modules
