"""Per-second sleep apnea detection from single-lead ECG with compact 1-D CNNs."""

from .costmodel import CostReport, EnergyModel, count_ops, estimate_energy, report_table
from .datapipe import DatasetSplit, EcgRecord, SampleWindow, WindowSet, make_windows, split_and_balance
from .metrics import Metrics
from .model_zoo import M1, M3, M4, ArchitectureConfig, ConvBlock, Model, build_model, load_model, save_model
from .sparsify import PruneSchedule
from .trainer import TrainConfig, TrainHistory, derive_patient_model, evaluate, train

__version__ = "0.1.0"
