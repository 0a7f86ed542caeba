"""Domain-adaptive dialog training with a meta-teacher assigning per-token
loss weights.

Modules: autodiff (reverse-mode engine), layers (GRU/attention/copy/
transformer), corpus (dialog data model and tooling), student (dialog
model), teacher (weight network), trainer (adversarial meta-training and
adaptation), metrics (evaluation suite), cli (command-line entry point).
"""

__version__ = "0.1.0"
