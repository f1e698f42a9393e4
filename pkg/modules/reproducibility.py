import json
import os
import random
import subprocess
from datetime import datetime

import numpy as np
import torch

PACKAGE_VERSION = "0.1.0"


def set_reproducible(seed, single_thread=True):
    """Seed every generator and force deterministic single-threaded kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if single_thread:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False


def version_string():
    """git-describe style version, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{PACKAGE_VERSION}"


def write_run_record(out_dir, command, config, seeds, deterministic=False):
    """
    Write run_record.json next to a run's outputs.

    Args:
        out_dir (str): Output directory
        command (str): Subcommand that produced the outputs
        config (dict): Full resolved configuration
        seeds (list): Seeds used
        deterministic (bool): Drop the wall-clock timestamp so records compare equal

    Returns:
        str: path of the record
    """
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "command": command,
        "version": version_string(),
        "seeds": list(seeds),
        "config": config,
    }
    if not deterministic:
        record["created"] = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    path = os.path.join(out_dir, "run_record.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=list)
    return path
