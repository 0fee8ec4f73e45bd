from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings. Run parameters live in the JSON run config instead."""

    model_config = SettingsConfigDict(env_prefix="TOOLDETECT_", env_file=".env", env_file_encoding="utf-8")

    # App configuration
    app_name: str = "Tool Detection Toolkit"

    # Logging
    log_level: str = "INFO"

    # Thread pool size for augmentation and dataset generation.
    # Results do not depend on it: every frame draws from its own seeded stream.
    workers: int = 4

    # Default output directory when --out is not given
    output_dir: str = "runs"

    # Frame images inside a video's frames directory
    frame_filename_pattern: str = "{frame_index:06d}.png"

    # Decoded frames kept in memory per training service (least recently used are dropped)
    image_cache_size: int = 4096

    # Artifact names written by `train`
    checkpoint_name: str = "checkpoint.npz"
    training_log_name: str = "training_log.jsonl"


settings = Settings()
