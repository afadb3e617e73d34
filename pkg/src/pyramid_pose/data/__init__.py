"""Datasets: meshes, synthetic scenes, BOP-format I/O and augmentation."""
