"""Anonymize speaker-embedding tables while keeping a target attribute.

Two methods are provided: shuffling every embedding dimension that carries
little mutual information with the attribute, and an adversarially trained
residual map that keeps attribute prosody predictable while making speaker
prosody unpredictable.  Prosody extraction, evaluation and a synthetic
corpus with planted structure come with them.
"""

__version__ = "0.1.0"
