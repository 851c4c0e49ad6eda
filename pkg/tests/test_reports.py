import numpy as np
import pandas as pd

from reports import plot_alpha_sweep, plot_batch_profile, plot_loss_curve
from scheduler import Manifest, ManifestEntry, plan_sorted_fixed, plan_varied

PNG_MAGIC = b"\x89PNG"


def test_alpha_sweep_figure(tmp_path):
    sweep = pd.DataFrame({"trial": [0, 1, 2], "alpha": [3.0, 0.5, 1.5], "wer": [0.2, 0.3, 0.1]})
    path = tmp_path / "sweep.png"
    plot_alpha_sweep(sweep, path, chosen=1.5)
    assert path.read_bytes()[:4] == PNG_MAGIC


def test_loss_curve_with_and_without_dev(tmp_path):
    metrics = pd.DataFrame({"epoch": [1, 2, 3], "train_loss": [4.0, 3.0, 2.5]})
    plot_loss_curve(metrics, tmp_path / "train.png")
    metrics["dev_loss"] = [4.5, 3.5, 3.1]
    plot_loss_curve(metrics, tmp_path / "dev.png")
    assert (tmp_path / "train.png").read_bytes()[:4] == PNG_MAGIC
    assert (tmp_path / "dev.png").read_bytes()[:4] == PNG_MAGIC


def test_batch_profile_figure(tmp_path):
    seconds = np.linspace(0.5, 12.0, 30).round(2)
    manifest = Manifest(entries=tuple(
        ManifestEntry(id=f"u{i:02d}", audio=f"u{i:02d}.wav", text="a", duration=s) for i, s in enumerate(seconds)
    ))
    plans = {"fixed": plan_sorted_fixed(manifest, 3).to_frame(), "varied": plan_varied(manifest, 3).to_frame()}
    path = tmp_path / "batches.png"
    plot_batch_profile(plans, path)
    assert path.read_bytes()[:4] == PNG_MAGIC
