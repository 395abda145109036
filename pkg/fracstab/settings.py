"""
Environment-driven settings.

Values come from the process environment, optionally seeded from a .env file
in the working directory (KEY=VALUE lines, '#' comments, optional quotes).
"""

import logging
import os
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parent.parent


def load_env_file(path: Path, override: bool = True) -> int:
    """Load KEY=VALUE pairs from ``path`` into os.environ.

    Returns the number of keys set. A missing or unreadable file is a no-op.
    """
    count = 0
    try:
        if not path.exists():
            return 0
        for raw in path.read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith('#') or '=' not in line:
                continue
            k, v = line.split('=', 1)
            k = k.strip()
            v = v.strip()
            # Strip inline comments if preceded by whitespace
            if ' #' in v:
                v = v.split(' #', 1)[0].rstrip()
            if (v.startswith('"') and v.endswith('"')) or (
                    v.startswith("'") and v.endswith("'")):
                v = v[1:-1]
            if override or k not in os.environ:
                os.environ[k] = v
                count += 1
    except Exception as e:
        logger.warning(f"⚠️ could not read {path}: {e}")
    return count


def _int_env(name: str, default: int, minimum: int = 1) -> int:
    raw = os.environ.get(name, '').strip()
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"⚠️ {name}={raw!r} is not an integer, using {default}")
        return default
    return max(minimum, value)


@dataclass
class Settings:
    threads: int
    chunk_size: int
    output_dir: Path
    config_dir: Path
    log_level: str

    @classmethod
    def from_env(cls, env_file: Optional[Path] = None) -> "Settings":
        if env_file is not None:
            load_env_file(env_file, override=False)
        return cls(
            threads=_int_env('FRACSTAB_THREADS', max(1, os.cpu_count() or 1)),
            chunk_size=_int_env('FRACSTAB_CHUNK_SIZE', 64),
            output_dir=Path(os.environ.get('FRACSTAB_OUTPUT_DIR', 'out')),
            config_dir=Path(os.environ.get('FRACSTAB_CONFIG_DIR', str(REPO_ROOT / 'configs'))),
            log_level=os.environ.get('FRACSTAB_LOG_LEVEL', 'INFO').upper(),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d['output_dir'] = str(self.output_dir)
        d['config_dir'] = str(self.config_dir)
        return d
