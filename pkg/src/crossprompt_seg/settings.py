"""Process-level settings.

Run-specific hyperparameters live in the YAML run configuration
(``core.config.RunConfig``). These settings cover the process: where outputs
go, how logging renders, and whether torch runs in deterministic mode.
Environment variable prefix: CROSSPROMPT_
"""

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Settings for crossprompt-seg.

    Environment variable prefix: CROSSPROMPT_
    """

    # Output layout
    out_dir: str = "runs"
    checkpoints_subdir: str = "checkpoints"
    logs_subdir: str = "logs"
    reports_subdir: str = "reports"
    resolved_config_name: str = "resolved_config.yaml"
    training_log_name: str = "train_log.ndjson"
    best_checkpoint_name: str = "best.pt"
    last_checkpoint_name: str = "last.pt"

    # Execution
    deterministic: bool = True
    torch_num_threads: int = 1

    # Logging
    log_level: str = "INFO"
    log_json: bool = False

    model_config = SettingsConfigDict(env_prefix="CROSSPROMPT_")
