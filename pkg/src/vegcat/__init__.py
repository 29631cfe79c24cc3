"""Vegetation change assessment toolkit.

Pipeline: train a small U-Net segmenter on weighted cross-entropy with
border-emphasis weight maps, propose regions via watershed, predict full
scenes by sliding-window inference, and compare two dates of the same
scene through tile-integrated vegetation areas and the change rate.
"""

__version__ = "0.1.0"
