"""Retraining-free switchable quantized networks for unsupervised domain adaptation."""

from .budget import (BudgetPlan, ConfigCost, bitops_of, enumerate_configs, layer_macs, macs_of, partition_budgets,
                     select_subnet)
from .quantizer import LsqQuantizer, QuantBounds, bounds_for, init_step, lsq_backward, quantize
from .supernet import (ArchSpec, ConfigSpace, PlainNet, SubnetConfig, Supernet, build_supernet, channels_at,
                       export_plain_weights, import_plain_weights, resize_input)

__version__ = "0.1.0"
