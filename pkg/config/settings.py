# Text GAN Toolkit - Configuration Settings
# Defaults for every RunConfig field plus library-wide constants.

# Special tokens (ids 0, 1, 2)
PAD_TOKEN = '<pad>'
SOS_TOKEN = '<sos>'
EOS_TOKEN = '<eos>'

# Corpus
VOCAB_SIZE = 5300           # content tokens, reserved tokens excluded
MAX_LEN = 50                # T_max, EOS included
VALID_FRACTION = 0.1        # held out when no validation file is given
WORD_VECTOR_INIT_STD = 0.01

# Model dimensions
EMBEDDING_DIM = 300
GEN_HIDDEN = 512
DISC_LAYERS = 'conv3-512,conv4-512,pool2,conv3-1024,conv4-1024,gmp,dense1024'
DISC_ACTIVATION = 'elu'
INIT_SCALE = 1.0            # multiplies the Glorot-uniform bound of every weight
MASKED_LOGIT = -1e9         # logit given to PAD and SOS

# Estimator
ESTIMATOR = 'taylor'        # taylor | reinforce | straight_through | gumbel_softmax | mle
BANDWIDTH = 0.5             # Lambda
ENTROPY_WEIGHT = 0.02       # lambda_H
BASELINE_DECAY = 0.9
GUMBEL_TAU_START = 1.0
GUMBEL_TAU_END = 0.3

# Discriminator regularizers
SN_WEIGHT = 0.07            # lambda_SN
EMBEDDING_WEIGHT = 0.2      # lambda_E
EMBEDDING_MAX_NORM = 1.0    # M
POWER_ITERS = 1             # per training step
VERIFY_POWER_ITERS = 100

# Optimization
BATCH_SIZE = 64
LEARNING_RATE = 1e-4
BETA1 = 0.5
BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 10.0
STEPS = 2000
SEED = 0

# Cadence
LOG_EVERY = 50              # status line every N steps
EVAL_EVERY = 500
CHECKPOINT_EVERY = 500

# Evaluation
EVAL_TEMPERATURE = 1.0
EVAL_SAMPLES = 1000
BLEU_MAX_ORDER = 3
BLEU_SMOOTHING = 0.1        # epsilon
SELF_BLEU_SAMPLES = 5000
RLM_MIN_SAMPLES = 1000
RLM_EPOCHS = 3
LM_LEARNING_RATE = 1e-3     # MLE language models (LM/RLM scorers, estimator = mle)
SWEEP_TEMPERATURES = '0.5,0.75,1.0,1.25,1.5'

# Oracle caps
ORACLE_MAX_TOKENS = 6
ORACLE_MAX_LEN = 4

# Paths
CORPUS_PATH = './data/train.txt'
VALID_PATH = ''
VECTORS_PATH = ''
OUTPUT_DIR = './runs'       # run directories with logs and checkpoints
RUN_NAME = 'run'
LM_CHECKPOINT = ''

# Application
APP_NAME = "Text GAN Toolkit"
APP_VERSION = "1.0"
CHECKPOINT_FORMAT_VERSION = 1
