"""semkp: consensus semantic keypoints from crowd annotations on 3D shapes.

Aggregates noisy multi-annotator clicks into consistent keypoint sets,
trains dense point embeddings from the consensus, and carries keypoints
into rendered views for PCK evaluation.
"""

__version__ = "0.1.0"
