"""
mlrep Configuration
===================

Configuration constants and environment-driven defaults for the pipeline.
"""

import os

# Try to load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass  # python-dotenv not installed, use defaults

# Output and logging
OUTPUT_ROOT = os.getenv('MLREP_OUTPUT_ROOT', 'runs')
LOG_LEVEL = os.getenv('MLREP_LOG_LEVEL', 'INFO').upper()

# Interactive mode for demonstrations
INTERACTIVE_MODE = os.getenv('MLREP_INTERACTIVE_MODE', 'false').lower() == 'true'

# Multimodal matrix
SEQUENCE_LENGTH = 20
MODALITY_ORDER = ('audio', 'vision', 'text')
MODALITY_WIDTHS = {
    'audio': 74,    # COVAREP
    'vision': 35,   # Facet
    'text': 300,    # GloVe
}

# Label schemas
SENTIMENT_TASK = 'sentiment'
EMOTION_TASKS = ('happy', 'sad', 'angry', 'neutral')
LABEL_SCHEMAS = {
    'sentiment': (SENTIMENT_TASK,),
    'emotions': EMOTION_TASKS,
}

# Convolutional autoencoder
ENCODER_CHANNELS = (32, 64, 128, 10)
ENCODER_KERNELS = (3, 3, 5, 5)
ENCODER_PADDING = 2
INIT_STD = 0.02
BATCHNORM_MOMENTUM = 0.1
BATCHNORM_EPS = 1e-5

# Optimizer and schedule
LEARNING_RATE = 0.002
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
SCHEDULER_FACTOR = 0.5
SCHEDULER_PATIENCE = 5
SCHEDULER_THRESHOLD = 1e-4
SCHEDULER_MIN_LR = 1e-5

# Training loop
BATCH_SIZE = 128
MAX_EPOCHS = 200
EARLY_STOP_PATIENCE = 10
PRECISION = 32  # bits used for training math; gradient checks always run at 64

# Logistic regression (C is the inverse regularization strength)
LOGREG_C = 1.0
LOGREG_TOL = 1e-6
LOGREG_MAX_ITER = 1000
DECISION_THRESHOLD = 0.5

# Gradient verification
GRADCHECK_EPS = 1e-5
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_TRIALS = 20

# Synthetic data
SYNTH_LATENT_DIM = 8
SYNTH_SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
