"""Flood-area segmentation with dilated and deconvolutional ConvNets and ensemble fusion."""

__version__ = "0.1.0"
