"""Loop-closure detection engine: retrieval, fusion, and pose estimation
over precomputed visual and LiDAR embeddings."""

__version__ = "0.1.0"
