"""Prometheus metrics for simulation, training and scans, written as a textfile per run"""
import logging
from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

from fbsdenet.config import settings

logger = logging.getLogger(__name__)

registry = CollectorRegistry()

# Worker Pool Metrics
worker_pool_size = Gauge('fbsdenet_worker_pool_size', 'Threads in the path-chunk worker pool', registry=registry)

# Simulation Metrics
paths_simulated = Counter(
    'fbsdenet_paths_simulated_total',
    'Simulated paths per track',
    ['track'],
    registry=registry,
)
lattice_scalars = Counter(
    'fbsdenet_lattice_sampled_scalars_total',
    'Standard Gaussian scalars drawn for Brownian lattices',
    registry=registry,
)

# Training Metrics
training_iterations = Counter('fbsdenet_training_iterations_total', 'Optimiser iterations performed', registry=registry)
training_loss = Gauge('fbsdenet_training_loss', 'Most recent training loss', registry=registry)
training_step_duration = Histogram(
    'fbsdenet_training_step_duration_seconds',
    'Wall time of one training iteration',
    buckets=[0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5],
    registry=registry,
)

# Scan Metrics
scan_cell_duration = Histogram(
    'fbsdenet_scan_cell_duration_seconds',
    'Wall time of one (kind, level) scan cell',
    buckets=[0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0],
    registry=registry,
)

# Error Metrics
numerical_aborts = Counter(
    'fbsdenet_numerical_aborts_total',
    'Runs aborted on non-finite or diverging values',
    ['reason'],
    registry=registry,
)


def write_metrics(out_dir: Path) -> Path:
    target = Path(out_dir) / settings.METRICS_FILENAME
    write_to_textfile(str(target), registry)
    logger.debug("metrics written path=%s", target)
    return target
