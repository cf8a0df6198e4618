"""Metapopulation-informed spatio-temporal attention network for epidemic forecasting.

Modules: ``geo_graph`` (gravity patch graph), ``epi_dynamics`` (SIR / MP-SIR),
``data_pipeline`` (ingestion, splits, scaling, windows), ``network`` (GRU + GAT
cell with parameter generators and fusion), ``training``, ``evaluation`` and
``cli``.
"""

__version__ = "0.1.0"
