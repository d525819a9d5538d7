"""Food image segmentation with a VQ-KD/MIM-pretrained ViT and a DCN-v3 backbone."""

__version__ = "0.1.0"
