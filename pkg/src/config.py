from pathlib import Path
from dotenv import load_dotenv
import os

# Define the root directory of the project
PROJECT_ROOT = Path(__file__).resolve().parent.parent

# Load environment variables from the .env file located in the project root
load_dotenv(PROJECT_ROOT / ".env")

# File Paths
# Default output directory for generated data, checkpoints and reports
DATA_DIR: Path = Path(os.getenv("CURVECOV_DATA_DIR", PROJECT_ROOT / "data"))

# Parallelism
# Upper bound on worker threads for window gradients and sample paths
THREADS: int = max(1, int(os.getenv("CURVECOV_THREADS", "1")))

# Reproducibility
DEFAULT_SEED: int = 42
# Chronological train / validation / test fractions
DEFAULT_SPLIT: tuple[float, float, float] = (0.7, 0.1, 0.2)

# Training defaults
MAX_EPOCHS: int = 100
MAX_STEPS: int = 10_000
# Windows per gradient step
BATCH_WINDOWS: int = 20
GRAD_CLIP: float = 10.0
WEIGHT_DECAY: float = 1e-8
LEARNING_RATE: float = float(os.getenv("CURVECOV_LEARNING_RATE", "1e-3"))

# Backbone and heads
HIDDEN_DIM: int = 40
LAG_WINDOW: int = 12
# Floor added to exp(log-variance head)
D_FLOOR: float = 1e-6
# Share of each node's training variance kept on the diagonal at initialisation
INIT_RESIDUAL_SHARE: float = 0.05

# Temporal correlation
BATCH_HORIZON: int = 12
MIXTURE_COMPONENTS: int = 4
LOW_RANK_DIM: int = 10
LENGTH_SCALE_STEP: float = 1.0
# Unit-diagonal nugget mixed into the temporal correlation
CORRELATION_NUGGET: float = 1e-6

# Curvature-aware spatial factor
ALPHA: float = 0.01
BETA: float = 1.0
BOTTLENECK_STRENGTH: float = 1.0
CURVATURE_THRESHOLD: float = 0.0
SENSITIVITY: float = 5.0
SIGMA_MIN: float = 1e-4

# Graph handling
# Weights above this value count as edges of the support graph
EDGE_THRESHOLD: float = 1e-12
# Connected iff second-smallest eigenvalue > CONNECTIVITY_TOL * largest
CONNECTIVITY_TOL: float = 1e-8
BRUTE_FORCE_MAX_NODES: int = 20
RANDOM_BISECTIONS: int = 10
# Gaussian kernel values below this are dropped when building graphs
KERNEL_THRESHOLD: float = 0.1
GRAPH_RETRIES: int = 20

# Covariance evaluation
DENSE_ORACLE_MAX_DIM: int = 2000

# Inference-time refinement
EWMA_DECAY: float = 0.94

# Evaluation
QUANTILE_LEVELS: tuple[float, ...] = (0.5, 0.9)
HORIZON_STEPS: tuple[int, ...] = (3, 6, 12)

# Checkpoint format version
CHECKPOINT_VERSION: int = 1

# Synthetic data defaults
SYNTH_NODES: int = 20
SYNTH_STEPS: int = 3000
SYNTH_PHI: float = 0.5
SYNTH_A: float = 0.5
SYNTH_B: float = 2.0
SYNTH_AMPLITUDE: float = 1.0
SYNTH_OBS_NOISE: float = 0.1
SYNTH_PERIOD: int = 24

# Ablation variants accepted by training, forecasting and the CLI
ABLATIONS: tuple[str, ...] = (
    "none",
    "no-rewiring",
    "no-volatility",
    "reweight-only",
    "diagonal",
)
