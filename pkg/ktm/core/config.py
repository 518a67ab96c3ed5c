import os
from typing import Optional
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Training defaults
    default_topics: int = int(os.getenv("KTM_DEFAULT_TOPICS", "10"))
    default_beta: float = float(os.getenv("KTM_DEFAULT_BETA", "0.1"))
    default_hyperopt_every: int = int(os.getenv("KTM_HYPEROPT_EVERY", "10"))
    default_hyperopt_steps: int = int(os.getenv("KTM_HYPEROPT_STEPS", "5"))
    default_tau: float = float(os.getenv("KTM_DEFAULT_TAU", "1.0"))
    
    # Numerical repair
    alpha_floor: float = float(os.getenv("KTM_ALPHA_FLOOR", "1e-8"))
    jitter_start: float = float(os.getenv("KTM_JITTER_START", "1e-10"))
    jitter_max: float = float(os.getenv("KTM_JITTER_MAX", "1e-4"))
    
    # Bridge validation
    mcmc_burn_in: int = int(os.getenv("KTM_MCMC_BURN_IN", "1000"))
    mcmc_samples: int = int(os.getenv("KTM_MCMC_SAMPLES", "20000"))
    oracle_repetitions: int = int(os.getenv("KTM_ORACLE_REPETITIONS", "12"))
    
    # Parallelism (0 = available parallelism)
    threads: int = int(os.getenv("KTM_THREADS", "0"))
    
    # Logging
    log_level: str = os.getenv("LOG_LEVEL", "INFO")
    log_format: str = os.getenv("LOG_FORMAT", "text")
    
    # Application
    app_name: str = "Kernel Topic Model"
    version: str = "1.0.0"
    model_format_version: int = 1
    debug: bool = os.getenv("DEBUG", "false").lower() == "true"
    
    class Config:
        env_file = ".env"
        case_sensitive = False


def resolve_threads(requested: Optional[int] = None) -> int:
    """
    Worker count: explicit request, else settings, else available parallelism
    """
    count = requested if requested else settings.threads
    if not count or count < 1:
        count = os.cpu_count() or 1
    return count


settings = Settings()
