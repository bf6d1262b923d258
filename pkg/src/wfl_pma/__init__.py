"""Wireless federated learning with partial model aggregation.

Modules:
    sysmodel   device, channel and energy models
    resopt     per-round bandwidth and computation-time allocation
    scheduler  virtual energy queues and set-expansion device selection
    model, pmafl, data
               split MLP, local training, partial aggregation, non-IID shards
    bounds     convergence-bound evaluators and constant estimation
    config, experiment, cli
               YAML configs, seeded runs, CSV output, command line
"""
__version__ = "0.1.0"
