import gzip
import hashlib
import json
from pathlib import Path
from threading import Lock

from loguru import logger

_s_print_lock = Lock()


def save_json(filename, d, indent: int = 2):
    """Save d into json file."""
    Path(filename).parent.mkdir(parents=True, exist_ok=True)
    with open(filename, 'w', encoding='UTF-8') as j:
        json.dump(d, j, indent=indent, sort_keys=False)
    logger.debug(f"Saved {Path(filename).name}.")


def load_json(filename):
    """Load from json (plain or .gz)."""
    opener = gzip.open if str(filename).endswith(".gz") else open
    with opener(filename, 'rt', encoding='UTF-8') as j:
        logger.debug(f"Opened {filename}...")
        return json.load(j)


def s_print(*a, **b):
    """Thread-safe print function."""
    with _s_print_lock:
        print(*a, **b)


def load_properties(properties_file) -> dict:
    """Parse a 'key = value' properties file into a dict of raw strings.

    Blank lines and lines starting with '#' are skipped. Values keep inner
    whitespace; surrounding whitespace is stripped.
    """
    properties_file = Path(properties_file)
    if not properties_file.is_file():
        raise FileNotFoundError(f"Properties file {properties_file} is missing!")

    properties = {}
    with open(properties_file, 'r', encoding='UTF-8') as a:
        for line_number, line in enumerate(a.read().split('\n'), start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ValueError(f"{properties_file}:{line_number}: expected 'key = value', got '{line}'")
            key, value = line.split('=', 1)
            properties[key.strip()] = value.strip()
    logger.debug(f"Loaded {len(properties)} properties from {properties_file.name}")
    return properties


def file_sha256(path, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()
