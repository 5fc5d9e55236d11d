"""
Runtime configuration for the slotlog inference engine and experiment harness.

Engine limits and logging settings come from `slotlog_config.json` next to
this module; an environment variable, when set and non-empty, wins over the
file. Experiment hyperparameters have their own schema (training.TrainConfig).
"""

import os
import json
from typing import Dict, Any, Optional
from dotenv import load_dotenv

load_dotenv()

MODULE_DIR = os.path.dirname(os.path.abspath(__file__))


class Config:
    """Engine settings resolved as environment > JSON file > built-in default."""

    def __init__(self, config_file: str = "slotlog_config.json"):
        self.config_file = config_file
        self._settings = self._read_settings(os.path.join(MODULE_DIR, config_file))

    @staticmethod
    def _read_settings(path: str) -> Dict[str, Any]:
        try:
            with open(path, 'r') as f:
                return json.load(f)
        except FileNotFoundError:
            print(f"Warning: {path} not found, using defaults")
        except json.JSONDecodeError as e:
            print(f"Error parsing {path}: {e}")
        return {}

    def get(self, key: str, default: Any = None, env_var: Optional[str] = None) -> Any:
        """Raw value for `key`, or the value of `env_var` when that is set."""
        override = os.getenv(env_var) if env_var else None
        if override:
            return override
        return self._settings.get(key, default)

    def as_dict(self) -> Dict[str, Any]:
        """Resolved settings, for logging at the start of a run."""
        return {
            "max_circuit_bits": self.max_circuit_bits,
            "max_oracle_worlds": self.max_oracle_worlds,
            "max_grounding_depth": self.max_grounding_depth,
            "probability_floor": self.probability_floor,
            "log_level": self.log_level,
            "log_to_file": self.log_to_file,
            "default_output_dir": self.default_output_dir,
        }

    # Engine limits
    @property
    def max_circuit_bits(self) -> int:
        """Boolean-equivalent bits a single compiled circuit may range over"""
        return int(self.get("max_circuit_bits", 24, "SLOTLOG_MAX_CIRCUIT_BITS"))

    @property
    def max_oracle_worlds(self) -> int:
        """World count the enumeration oracle refuses to exceed"""
        return int(self.get("max_oracle_worlds", 2 ** 20, "SLOTLOG_MAX_ORACLE_WORLDS"))

    @property
    def max_grounding_depth(self) -> int:
        """Nesting depth of subgoal calls before grounding gives up"""
        return int(self.get("max_grounding_depth", 256, "SLOTLOG_MAX_GROUNDING_DEPTH"))

    @property
    def probability_floor(self) -> float:
        """Floor applied to p(y) before taking the log in the task term"""
        return float(self.get("probability_floor", 1e-12))

    # Logging
    @property
    def log_dir(self) -> str:
        """Directory for rotating log files, relative to the package"""
        log_path = self.get("log_path", "logs/")
        return os.path.join(MODULE_DIR, log_path)

    @property
    def log_level(self) -> str:
        """Threshold name understood by the logging module"""
        return self.get("log_level", "INFO", "LOG_LEVEL")

    @property
    def log_to_file(self) -> bool:
        """Whether to also write rotating JSON logs under log_dir"""
        value = self.get("log_to_file", False, "SLOTLOG_LOG_TO_FILE")
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes")
        return bool(value)

    @property
    def default_output_dir(self) -> str:
        """Where CLI commands put artifacts when --out is not given"""
        return self.get("default_output_dir", "runs/", "SLOTLOG_OUTPUT_DIR")


# shared by every module
config = Config()
