"""
A Python library for unsupervised video object segmentation from motion,
with appearance refinement and label-free model selection.
"""

__version__ = "0.1.0"
__author__ = 'pyRCF contributors'
