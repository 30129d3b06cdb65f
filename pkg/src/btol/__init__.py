"""Black-box test-time adaptation of segmentation models behind a forward/VJP oracle."""
from .models import AdapterSpec, SegNetSpec, build_adapter, build_segnet, load_checkpoint, save_checkpoint
from .oracle import LocalOracle, OracleError, OracleMode, OracleServer, RemoteOracle, serve
from .taskgen import SOURCE_PARAMS, TARGET_PARAMS, DomainParams, SegDataset, default_shift_pair, generate
from .trainer import AdaptConfig, run_baseline, run_blackbox, run_bpba, run_bpba_pipeline, train_source

__version__ = "0.1.0"
