"""Deep latent space particle filter: WAE surrogate, transformer stepper and particle filters."""

__version__ = "0.1.0"
