import copy
import json
from pathlib import Path
from typing import Any, Dict

# Default run configuration shipped with the repo
DATA_FILE = Path(__file__).parent / 'defaults.json'


def load_defaults_data(path: Path = DATA_FILE) -> Dict[str, Any]:
    """Load the defaults JSON file"""
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


# Load data once at module import
_defaults_data = load_defaults_data()

DEFAULT_CONFIG: Dict[str, Any] = _defaults_data['config']


def default_config() -> Dict[str, Any]:
    """A private deep copy of the defaults, safe to merge into."""
    return copy.deepcopy(DEFAULT_CONFIG)
