"""Fault detection and diagnosis for an electrically actuated valve.

Modules: ``sim`` (synthetic trajectories), ``data`` (splits, scaling,
windows, resampling), ``tcae`` (autoencoder), ``gbt`` (boosted trees),
``calib`` (calibration), ``detect`` (CUSUM trigger), ``ood`` (conformal
anomaly detection), ``evaluation`` (metrics and reports), ``pipeline`` and
``cli`` (orchestration).
"""

__version__ = "0.1.0"
