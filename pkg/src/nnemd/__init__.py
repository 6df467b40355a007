"""Neural-network training over encrypted multi-source data.

The first-layer products X·W and X^T·σ are computed from ciphertexts with
inner-product functional encryption; everything after layer 1 runs in
plaintext on the server.
"""
__version__ = "0.1.0"
