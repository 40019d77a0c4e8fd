"""Patient-specific ICU discharge vitals: data model, baselines, a numpy LSTM
and a stratified evaluation harness."""

__version__ = "0.1.0"
