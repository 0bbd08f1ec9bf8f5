"""
Configuration management for evolution, data and harness defaults.
Centralizes all environment variable loading with validation and defaults.
"""
import os
import logging
from typing import Any, Dict, Optional

from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

# Environment keys that must hold strictly positive numbers
NUMERIC_KEYS = [
    'GENERATIONS',
    'POPULATION_SIZE',
    'TOURNAMENT_SIZE',
    'INIT_MAX_DEPTH',
    'MAX_DEPTH',
    'ELITISM',
    'RUNS',
    'TRAINING_SIZE',
    'WORKERS',
    'RF_TREES',
    'RF_MAX_DEPTH',
    'TOP_K',
    'TUKEY_K',
]


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(f"M3GP_{name}")
    if raw is None or raw.strip() == '':
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"M3GP_{name}={raw!r} is not an integer, using {default}")
        return default


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(f"M3GP_{name}")
    if raw is None or raw.strip() == '':
        return default
    try:
        return float(raw)
    except ValueError:
        logger.warning(f"M3GP_{name}={raw!r} is not a number, using {default}")
        return default


class Config:
    """Configuration manager for run parameters and harness defaults."""

    def __init__(self):
        """Initialize configuration with environment variables."""
        self.config = self._load_config()
        self._validate_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from environment variables."""
        return {
            # Evolution
            'GENERATIONS': _env_int('GENERATIONS', 50),
            'POPULATION_SIZE': _env_int('POPULATION_SIZE', 200),
            'TOURNAMENT_SIZE': _env_int('TOURNAMENT_SIZE', 5),
            'INIT_MAX_DEPTH': _env_int('INIT_MAX_DEPTH', 6),
            'MAX_DEPTH': _env_int('MAX_DEPTH', 17),
            'ELITISM': _env_int('ELITISM', 1),
            'RUNS': _env_int('RUNS', 30),
            'SEED': _env_int('SEED', 0),

            # Data
            'TRAINING_SIZE': _env_int('TRAINING_SIZE', 2000),
            'LABEL_COLUMN': os.getenv('M3GP_LABEL_COLUMN', 'class'),

            # Baselines
            'RF_TREES': _env_int('RF_TREES', 100),
            'RF_MAX_DEPTH': _env_int('RF_MAX_DEPTH', 6),

            # Harvest and statistics
            'TOP_K': _env_int('TOP_K', 10),
            'SIGNIFICANCE_LEVEL': _env_float('SIGNIFICANCE_LEVEL', 0.01),
            'TUKEY_K': _env_float('TUKEY_K', 1.5),

            # Execution
            'WORKERS': _env_int('WORKERS', 1),

            # Logging
            'LOG_LEVEL': os.getenv('M3GP_LOG_LEVEL', 'INFO').upper(),
            'LOG_FILE': os.getenv('M3GP_LOG_FILE') or None,
        }

    def _validate_config(self):
        """Validate numeric configuration values."""
        for config_key in NUMERIC_KEYS:
            value = self.config.get(config_key)
            if value is not None and value <= 0:
                logger.warning(f"M3GP_{config_key} should be positive, got {value}")

        alpha = self.config.get('SIGNIFICANCE_LEVEL')
        if not 0 < alpha < 1:
            logger.warning(f"M3GP_SIGNIFICANCE_LEVEL should lie in (0, 1), got {alpha}")

        if self.config['INIT_MAX_DEPTH'] > self.config['MAX_DEPTH']:
            logger.warning(
                f"M3GP_INIT_MAX_DEPTH ({self.config['INIT_MAX_DEPTH']}) exceeds "
                f"M3GP_MAX_DEPTH ({self.config['MAX_DEPTH']})"
            )

        if logging.getLevelName(self.config['LOG_LEVEL']) == f"Level {self.config['LOG_LEVEL']}":
            logger.warning(f"Unknown M3GP_LOG_LEVEL {self.config['LOG_LEVEL']!r}, using INFO")
            self.config['LOG_LEVEL'] = 'INFO'

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by key."""
        return self.config.get(key, default)

    def get_run_config(self, seed: Optional[int] = None):
        """Build an engine RunConfig from the configured evolution values."""
        from .engine import RunConfig

        return RunConfig(
            generations=self.config['GENERATIONS'],
            population_size=self.config['POPULATION_SIZE'],
            tournament_size=self.config['TOURNAMENT_SIZE'],
            init_max_depth=self.config['INIT_MAX_DEPTH'],
            max_depth=self.config['MAX_DEPTH'],
            elitism=self.config['ELITISM'],
            runs=self.config['RUNS'],
            seed=self.config['SEED'] if seed is None else seed,
            workers=self.config['WORKERS'],
        )

    def get_service_config(self) -> Dict[str, Any]:
        """Get grouped configuration sections."""
        return {
            'evolution': {
                'generations': self.config.get('GENERATIONS'),
                'population_size': self.config.get('POPULATION_SIZE'),
                'tournament_size': self.config.get('TOURNAMENT_SIZE'),
                'init_max_depth': self.config.get('INIT_MAX_DEPTH'),
                'max_depth': self.config.get('MAX_DEPTH'),
                'elitism': self.config.get('ELITISM'),
                'runs': self.config.get('RUNS'),
                'seed': self.config.get('SEED'),
            },
            'data': {
                'training_size': self.config.get('TRAINING_SIZE'),
                'label_column': self.config.get('LABEL_COLUMN'),
            },
            'baselines': {
                'rf_trees': self.config.get('RF_TREES'),
                'rf_max_depth': self.config.get('RF_MAX_DEPTH'),
            },
            'statistics': {
                'top_k': self.config.get('TOP_K'),
                'significance_level': self.config.get('SIGNIFICANCE_LEVEL'),
                'tukey_k': self.config.get('TUKEY_K'),
            },
            'execution': {
                'workers': self.config.get('WORKERS'),
            },
            'logging': {
                'level': self.config.get('LOG_LEVEL'),
                'file': self.config.get('LOG_FILE'),
            },
        }

    def print_config_status(self):
        """Log configuration status for debugging."""
        logger.info("=== Configuration Status ===")
        for section, values in self.get_service_config().items():
            rendered = ', '.join(f"{key}={value}" for key, value in values.items())
            logger.info(f"  {section}: {rendered}")
        logger.info("=== End Configuration Status ===")


# Global configuration instance
config = Config()


def get_config() -> Config:
    """Get the global configuration instance."""
    return config
