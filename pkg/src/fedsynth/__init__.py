"""One-shot federated learning via privacy-perturbed latent distillates.

Clients condense their local data into small sets of informative image
patches, perturb them in the Fourier domain, compress them into autoencoder
latents aligned with the originals in feature space, and ship only
(latent, soft label) pairs to the server, which decodes and distills them
into a global model in a single communication round.
"""

__version__ = "0.1.0"
