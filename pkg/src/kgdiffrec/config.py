"""
Configuration settings for the kgdiffrec system

This module manages process-level settings loaded from environment variables
with sensible defaults. It provides centralized configuration for:
- Output locations for checkpoints, metric traces and reports
- Logging verbosity
- Thread count for random-walk sampling and torch kernels
- The optional attention-matrix cache

Model hyperparameters are not environment settings; they live in the pydantic
models of `kgdiffrec.models` and come from run config files and CLI flags.

Environment variables can be set via .env file or system environment.
"""
import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    """
    Process configuration class

    All settings are loaded from environment variables with fallback defaults.

    Output:
        OUTPUT_DIR: Default directory for run artifacts (KGDIFFREC_OUTPUT_DIR)

    Logging:
        LOG_LEVEL: Root logging level used by the CLI (KGDIFFREC_LOG_LEVEL)

    Execution:
        THREADS: Worker threads, 0 means all cores (KGDIFFREC_THREADS)

    Caching:
        ATTENTION_CACHE_DIR: Directory for cached attention matrices;
            empty disables the cache (KGDIFFREC_ATTENTION_CACHE_DIR)
    """

    OUTPUT_DIR = os.getenv('KGDIFFREC_OUTPUT_DIR', 'runs')

    LOG_LEVEL = os.getenv('KGDIFFREC_LOG_LEVEL', 'INFO').upper()

    THREADS = int(os.getenv('KGDIFFREC_THREADS', '0'))

    ATTENTION_CACHE_DIR = os.getenv('KGDIFFREC_ATTENTION_CACHE_DIR', '')

    # Interaction / KG / label file conventions
    FIELD_SEPARATOR = '\t'
    COMMENT_PREFIX = '#'

    # Checkpoint header
    CHECKPOINT_MAGIC = 'kgdiffrec-checkpoint'
    CHECKPOINT_VERSION = 1

    # Ablation variant names, in report order
    ABLATION_VARIANTS = ['full', 'no_attention', 'no_guidance', 'no_contrastive']
