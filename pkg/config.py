import os

from dotenv import load_dotenv

load_dotenv()

VERSION = "0.1.0"

# Sampler Settings (three chains of 35000 iterations, 10000 burn-in, thinned by 5)
N_CHAINS = 3
N_ITER = 35000
BURN_IN = 10000
THIN = 5
SEED = int(os.getenv("HERIT_SEED", "20190604"))
MIN_KEPT_DRAWS = 100
MIN_AR_DRAWS = 20  # shorter chains use the sample variance as S(0)

# Prior Settings
WISHART_DOF = None  # None means "number of traits d"
COEF_PRIOR_VARIANCE = 1e4  # variance, i.e. precision 1e-4 in BUGS terms

# Numerical Tolerances
STANDARDIZE_TOL = 1e-10
SPD_SYMMETRY_TOL = 1e-10
EIGEN_CLIP_TOL = 1e-8
JITTER_SCALE = 1e-10
KINSHIP_BLOCK_SIZE = 2048

# Prediction Settings
DENSE_BLUP_MAX_DIM = 20000
CG_RTOL = 1e-12
CV_FOLDS = 5

# Univariate ML Settings
H2_GRID_POINTS = 100
H2_TOL = 1e-8
H2_BOUNDARY_TOL = 1e-6
H2_CURVATURE_STEP = 1e-4

# Effect-size prior histogram grid, overflow bins on both sides
HIST_LOW = -5.0
HIST_HIGH = 5.0
HIST_STEP = 0.01

# Trace export
DENSITY_GRID_POINTS = 512

# Simulation defaults
SIM_MAF_RANGE = (0.05, 0.5)
SIM_MAX_RESAMPLE = 1000

# Output Settings
FLOAT_FORMAT = "%.17g"
MISSING_TOKEN = "NA"
THREADS = int(os.getenv("HERIT_THREADS", "1"))
LOG_LEVEL = os.getenv("HERIT_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
