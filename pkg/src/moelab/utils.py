"""Basic functions for the moelab package.

Includes helper functions to:
-Read JSON configuration files,
-Write JSON and CSV result files,
-Plot log-log convergence curves and ratio curves,
-Read the worker count from the environment.
"""

import json
import os

import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from moelab.exceptions import ConfigError

THREADS_VARIABLE = "MOE_LAB_THREADS"

# Fixed ids and no date, so the same data gives the same SVG bytes.
SVG_HASH_SALT = "moelab"


def read_json_file(filename: str) -> dict:
    """Read a JSON object from a file.

    Args:
        filename: Path to the JSON file.

    Returns:
        The parsed object.

    Raises:
        FileNotFoundError: If the file doesn't exist.
        ConfigError: If the file is not valid JSON or not an object.
    """
    if not os.path.exists(filename):
        raise FileNotFoundError(f"The file '{filename}' was not found.")

    with open(filename, "r", encoding="utf-8") as file:
        try:
            data = json.load(file)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Invalid JSON in {filename}: {exc}") from exc

    if not isinstance(data, dict):
        raise ConfigError(f"The file '{filename}' must hold a JSON object.")
    return data


def write_json(filename, data: dict) -> None:
    """Write `data` as indented JSON with sorted keys and a final newline.

    Raises:
        OSError: If the file cannot be written.
    """
    try:
        with open(filename, "w", encoding="utf-8") as file:
            json.dump(data, file, indent=2, sort_keys=True, allow_nan=False)
            file.write("\n")
    except OSError as exc:
        raise OSError(f"Could not write '{filename}': {exc}") from exc


def write_csv(filename, frame: pd.DataFrame) -> None:
    """Write a table without index and with unix line endings.

    Raises:
        OSError: If the file cannot be written.
    """
    try:
        frame.to_csv(filename, index=False, lineterminator="\n")
    except OSError as exc:
        raise OSError(f"Could not write '{filename}': {exc}") from exc


def worker_count() -> int:
    """Number of worker processes from MOE_LAB_THREADS, all CPUs when unset.

    Raises:
        ConfigError: If the variable is not a positive integer.
    """
    raw = os.environ.get(THREADS_VARIABLE, "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        workers = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_VARIABLE} must be an integer, got '{raw}'.",
                          key=THREADS_VARIABLE) from exc
    if workers < 1:
        raise ConfigError(f"{THREADS_VARIABLE} must be >= 1, got {workers}.",
                          key=THREADS_VARIABLE)
    return workers


def _save_svg(filename) -> None:
    try:
        plt.savefig(filename, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise OSError(f"Could not write '{filename}': {exc}") from exc
    finally:
        plt.close()


def plot_loglog(
        filename,
        n_grid: np.ndarray,
        means: np.ndarray,
        stds: np.ndarray,
        slope: float | None,
        intercept: float | None,
        title: str = "",
        ylabel: str = "loss",
        fig_size: tuple[int, int] = (6, 4),
) -> None:
    """Saves a log-log plot of mean values with +-2 std bars and the fitted line.

    Args:
        filename: Path of the SVG file.
        n_grid: Sample sizes.
        means: Mean value per size.
        stds: Standard deviation per size.
        slope: Fitted slope, the line is omitted when None.
        intercept: Fitted intercept.
        title: Plot title.
        ylabel: Label of the y axis.
        fig_size: Size of the figure in inches.
    """
    matplotlib.use("agg") # Use non-GUI backend
    plt.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    n_grid = np.asarray(n_grid, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)

    plt.figure(figsize=fig_size)
    # Lower bars are clipped so they stay on the log scale.
    lower = np.minimum(2 * stds, means * (1 - 1e-3))
    plt.errorbar(n_grid, means, yerr=[lower, 2 * stds], fmt="o", color="tab:blue",
                 capsize=3, label="mean")
    if slope is not None:
        plt.plot(n_grid, np.exp(intercept) * n_grid ** slope, "-.", color="tab:red",
                 label=f"slope {slope:.3f}")
    plt.xscale("log")
    plt.yscale("log")
    plt.xlabel("n")
    plt.ylabel(ylabel)
    plt.title(title)
    plt.legend()
    plt.tight_layout()
    _save_svg(filename)


def plot_ratio_curve(
        filename,
        n_grid: np.ndarray,
        ratios: np.ndarray,
        title: str = "",
        fig_size: tuple[int, int] = (6, 4),
) -> None:
    """Saves a log-log plot of ||f_Gn - f_G*|| / D3 against n."""
    matplotlib.use("agg") # Use non-GUI backend
    plt.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    plt.figure(figsize=fig_size)
    plt.plot(np.asarray(n_grid, dtype=np.float64), np.asarray(ratios, dtype=np.float64),
             "o-", color="tab:green")
    plt.xscale("log")
    plt.yscale("log")
    plt.xlabel("n")
    plt.ylabel("L2 distance / D3")
    plt.title(title)
    plt.tight_layout()
    _save_svg(filename)
