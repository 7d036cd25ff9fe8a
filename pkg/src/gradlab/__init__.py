"""gradlab: gradient-leakage experiments on desk-scale CTC models.

Modules
-------
ctc         CTC loss and gradient in log space, brute-force oracle
model       dense/recurrent CTC model with manual backprop and dropout
corpus      synthetic speaker corpus, normalization, MAE
attack      Hessian-free gradients matching (single, batch, multi-step)
defense     DP-SGD clipping and noise
speaker     triplet-trained speaker encoder, enrollment and ranking
experiment  end-to-end runs, reports and sweeps
cli         ``gradlab`` command-line entry point
"""

__version__ = "0.1.0"
