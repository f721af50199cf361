"""Numpy core of an attentive ConvLSTM saliency model with learned Gaussian priors."""

__version__ = "0.1.0"
