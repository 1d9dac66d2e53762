"""Semi-supervised domain adaptation for road segmentation."""
