import logging
import numpy as np
import torch

from config.config import TORCH_NUM_THREADS

logger = logging.getLogger(__name__)

# Fixed stage indices for seed forking; append only
STAGE_INDEX = {
    'gen-env': 0,
    'gen-data': 1,
    'augment': 2,
    'train-ckm': 3,
    'train-ppo': 4,
    'plan': 5,
    'compare': 6,
    'eval': 7,
}


def initialize_ml_dependencies(seed=0, num_threads=TORCH_NUM_THREADS):
    """Initialize machine learning dependencies"""
    try:
        # Initialize NumPy
        np.random.seed(seed)

        # Initialize PyTorch: 64-bit floats, CPU, deterministic kernels
        torch.set_default_dtype(torch.float64)
        torch.set_num_threads(num_threads)
        torch.use_deterministic_algorithms(True)
        torch.manual_seed(seed)

        logger.info(f"ML dependencies initialized (seed={seed}, threads={num_threads})")
    except Exception as e:
        logger.error(f"Error initializing ML dependencies: {str(e)}")
        raise


def stage_seed(global_seed, stage, worker=0):
    """
    Derive the seed of one stage (and worker) from the global seed.
    Args:
        global_seed (int): run-wide seed
        stage (str): stage name, a key of STAGE_INDEX
        worker (int): worker or repetition counter inside the stage
    Returns:
        int: 32-bit child seed
    """
    sequence = np.random.SeedSequence(global_seed, spawn_key=(STAGE_INDEX[stage], worker))
    return int(sequence.generate_state(1)[0])


def torch_generator(seed):
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator
