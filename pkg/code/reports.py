# %%
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

logger = logging.getLogger(__name__)


def plot_alpha_sweep(sweep, path, chosen=None):
    """Dev WER against the sampled LM weights."""
    ordered = sweep.sort_values("alpha")
    plt.figure(figsize=(10, 6))
    plt.plot(ordered["alpha"], ordered["wer"] * 100, marker="o", linestyle="-")
    if chosen is not None:
        plt.axvline(x=chosen, color="red", linestyle="--", label=f"alpha = {chosen:.3f}")
        plt.legend()
    plt.xlabel("LM weight alpha")
    plt.ylabel("Dev WER (%)")
    plt.title("Rescoring WER vs LM Weight")
    plt.grid(axis="y")
    plt.tight_layout()
    plt.savefig(path, dpi=150)
    plt.close()
    logger.info("wrote %s", path)


def plot_batch_profile(plans, path):
    """Batch size and longest length per batch for each named plan DataFrame."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(12, 8), sharex=True)
    for name, frame in plans.items():
        top.step(frame["batch"], frame["size"], where="mid", label=name)
        bottom.plot(frame["batch"], frame["max_frames"], label=name)
    top.set_ylabel("Batch size")
    top.set_title("Batch Size and Longest Utterance per Batch")
    top.legend()
    bottom.set_ylabel("Longest utterance (frames)")
    bottom.set_xlabel("Batch index (sorted order)")
    bottom.grid(axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info("wrote %s", path)


def plot_loss_curve(metrics, path):
    plt.figure(figsize=(10, 6))
    plt.plot(metrics["epoch"], metrics["train_loss"], marker="o", label="train")
    if "dev_loss" in metrics:
        plt.plot(metrics["epoch"], metrics["dev_loss"], marker="s", linestyle="--", label="dev")
    plt.xlabel("Epoch")
    plt.ylabel("Mean CTC loss (nats)")
    plt.title("Training Loss")
    plt.legend()
    plt.grid(axis="y")
    plt.tight_layout()
    plt.savefig(path, dpi=150)
    plt.close()
    logger.info("wrote %s", path)
