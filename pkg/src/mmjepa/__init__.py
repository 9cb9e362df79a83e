"""Desk-scale multimodal joint-embedding predictive pretraining laboratory.

Everything runs on numpy with a hand-built reverse-mode tape; scipy supplies
special functions and FFTs. Submodules:

- tensor, optim, gradcheck: the autodiff engine, Adam, finite differences
- checkpoint: single-file binary snapshots
- cohort: the synthetic causal data generator and dataset serialization
- kernelscore: frequency-domain smoothness scoring of 2-D kernels
- model: encoder, predictor, classifier built on the tape
- jepa: masked latent-prediction pretraining loop with collapse monitoring
- finetune: supervised training / fine-tuning loops
- evaluation: tie-aware AUC, exact oracle, Wilcoxon comparisons
- runs: end-to-end experiment drivers
- cli: command-line entry points
"""

__version__ = "0.1.0"
