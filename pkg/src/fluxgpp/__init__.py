"""Daily forest GPP prediction from multimodal daily tokens.

The package covers the full desk-scale pipeline: tower-level feature
engineering (vegetation-index PCA, radar indices, clear-sky radiation),
two sequence regressors (a stacked LSTM and a decoder-only transformer)
built on a small reverse-mode autodiff kernel, smoothed-MAE training with
HyperBand tuning, and the permutation diagnostics (memory retention,
modality importance) used to probe what the models actually read from
their 120-day context.  A bundled synthetic flux-site generator makes the
whole thing runnable end to end without any external data.
"""

__version__ = "0.1.0"
