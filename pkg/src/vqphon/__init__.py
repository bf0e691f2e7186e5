"""VQ-phonetic tokenizer: mel frontend, VQ-VAE networks, WGAN-GP trainer,
and ARPAbet-to-IPA lexicon tools."""

__version__ = "0.1.0"
