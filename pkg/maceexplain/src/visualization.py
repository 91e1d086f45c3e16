import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from typing import Optional

from .evaluator import (
    AblationReport,
    FaithfulnessReport,
    OutputFidelityReport,
    RankAnalyticsReport,
    RobustnessReport,
    StabilityReport,
)
from .trainer import TrainReport


def _finish(fig, output_path: Optional[str]) -> None:
    """Saves the figure when a path is given, shows it otherwise."""
    if output_path:
        fig.savefig(output_path)
        plt.close(fig)
    else:
        plt.show()


def loss_components(report: TrainReport) -> pd.DataFrame:
    """Sums the per-class loss columns into one column per loss family.

    Args:
        report: Training report with one row per epoch

    Returns:
        DataFrame indexed by epoch with columns embedding, relevance and,
        when recorded, reconstruction and output
    """
    frame = report.to_frame().set_index('epoch')
    components = pd.DataFrame(index=frame.index)
    components['embedding'] = frame.filter(regex=r'^LE_').sum(axis=1)
    components['relevance'] = frame.filter(regex=r'^LR_').sum(axis=1)
    if 'LD' in frame:
        components['reconstruction'] = frame['LD']
    if 'LO' in frame:
        components['output'] = frame['LO']
    components['total'] = frame['total']
    return components


def plot_loss_curves(
    report: TrainReport,
    output_path: Optional[str] = None
) -> None:
    """Plots the mean loss of every family per epoch.

    Args:
        report: Training report
        output_path: PNG file to write; the plot is shown if omitted
    """
    df = loss_components(report)

    fig, ax = plt.subplots(figsize=(10, 6))
    for column in df.columns:
        ax.plot(
            df.index, df[column],
            label=column,
            linewidth=2 if column == 'total' else 1
        )
    ax.set_xlabel('Epoch')
    ax.set_ylabel('Mean loss per batch')
    ax.set_yscale('log')
    ax.grid(True, axis='y')
    ax.legend(loc='upper right', frameon=True, facecolor='white')
    ax.set_title(f'Training losses (seed {report.seed})')
    _finish(fig, output_path)


def plot_faithfulness(
    report: FaithfulnessReport,
    output_path: Optional[str] = None
) -> None:
    """Mean probability drop against the mask threshold, one line per method.

    Args:
        report: Faithfulness sweep
        output_path: PNG file to write; the plot is shown if omitted
    """
    df = report.summary()

    fig, ax = plt.subplots(figsize=(8, 5))
    colors = {'mace': 'tab:blue', 'random': 'tab:gray'}
    for method in df.columns:
        ax.plot(
            df.index, df[method],
            marker='o',
            color=colors.get(method),
            label=method
        )
    ax.set_xlabel('Threshold')
    ax.set_ylabel('Mean drop in predicted-class probability')
    ax.grid(True)
    ax.legend(frameon=True, facecolor='white')
    ax.set_title('Faithfulness')
    _finish(fig, output_path)


def plot_ablation(
    report: AblationReport,
    output_path: Optional[str] = None
) -> None:
    """Mean faithfulness drop per threshold for every loss variant."""
    df = report.summary()

    fig, ax = plt.subplots(figsize=(8, 5))
    for variant in df.columns:
        ax.plot(df.index, df[variant], marker='o', label=variant)
    ax.set_xlabel('Threshold')
    ax.set_ylabel('Mean drop in predicted-class probability')
    ax.grid(True)
    ax.legend(frameon=True, facecolor='white')
    ax.set_title('Loss ablation')
    _finish(fig, output_path)


def plot_robustness(
    report: RobustnessReport,
    threshold: Optional[float] = None,
    output_path: Optional[str] = None
) -> None:
    """IoU against perturbation intensity, one panel per perturbation kind.

    Args:
        report: Robustness sweep
        threshold: Threshold to show; all thresholds are averaged if None
        output_path: PNG file to write; the plot is shown if omitted
    """
    df = report.summary()
    if threshold is not None:
        df = df[np.isclose(df['threshold'], threshold)]
    df = df.groupby(['kind', 'intensity'])['iou'].mean().reset_index()

    kinds = list(dict.fromkeys(df['kind']))
    fig, axes = plt.subplots(
        1, max(1, len(kinds)), figsize=(4 * max(1, len(kinds)), 4),
        squeeze=False
    )
    for ax, kind in zip(axes[0], kinds):
        rows = df[df['kind'] == kind].sort_values('intensity')
        ax.plot(rows['intensity'], rows['iou'], marker='o')
        ax.set_title(kind)
        ax.set_xlabel('Intensity')
        ax.set_ylim(0, 1.05)
        ax.grid(True)
    axes[0][0].set_ylabel('Mean IoU')
    fig.tight_layout()
    _finish(fig, output_path)


def plot_distance_matrix(
    report: StabilityReport,
    output_path: Optional[str] = None
) -> None:
    """Heatmap of the concept-major embedding distance matrix.

    Block boundaries between concepts are drawn as white lines.
    """
    n = len(report.image_ids)
    size = len(report.distances)

    fig, ax = plt.subplots(figsize=(7, 6))
    image = ax.imshow(report.distances, cmap='viridis')
    for boundary in range(n, size, n):
        ax.axhline(boundary - 0.5, color='white', linewidth=1)
        ax.axvline(boundary - 0.5, color='white', linewidth=1)
    centers = [i * n + (n - 1) / 2 for i in range(len(report.concepts))]
    ax.set_xticks(centers)
    ax.set_xticklabels([f'c{c}' for c in report.concepts])
    ax.set_yticks(centers)
    ax.set_yticklabels([f'c{c}' for c in report.concepts])
    fig.colorbar(image, ax=ax, label='Euclidean distance')
    ax.set_title(
        f'Embedding distances (intra {report.intra_mean:.3f}, '
        f'inter {report.inter_mean:.3f})'
    )
    _finish(fig, output_path)


def plot_relevance_ranks(
    report: RankAnalyticsReport,
    output_path: Optional[str] = None
) -> None:
    """Rank percentages next to AVG True against AVG Others per concept.

    Args:
        report: Rank analytics
        output_path: PNG file to write; the plot is shown if omitted
    """
    ranks = report.ranks
    concepts = report.concepts

    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 5))
    left.bar(ranks['rank'], ranks['mean_percentage'], color='tab:blue')
    left.set_xticks(list(ranks['rank']))
    left.set_xlabel('Rank of the class in the black-box prediction')
    left.set_ylabel('Mean % of positive concepts below class average')
    left.set_ylim(0, 100)
    left.grid(True, axis='y')

    right.scatter(concepts['avg_others'], concepts['avg_true'],
                  c=concepts['class_index'], cmap='tab10')
    values = pd.concat([concepts['avg_others'], concepts['avg_true']])
    if len(values.dropna()):
        low, high = values.min(), values.max()
        right.plot([low, high], [low, high], color='gray', linestyle='--')
    right.set_xlabel('AVG Others')
    right.set_ylabel('AVG True')
    right.grid(True)
    right.set_title(
        f'True above others: {report.true_above_others_fraction:.0%}'
    )
    fig.tight_layout()
    _finish(fig, output_path)


def plot_fidelity(
    report: OutputFidelityReport,
    output_path: Optional[str] = None
) -> None:
    """Predicted-class probability from z_hat against the one from z.

    Points on the diagonal are reproduced exactly; disagreeing images are
    drawn in red.
    """
    if report.rows is None:
        raise ValueError('Fidelity report carries no per-image rows')
    rows = report.rows
    colors = np.where(rows['agree'], 'tab:blue', 'tab:red')

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(rows['p_original'], rows['p_reconstructed'], c=colors, s=12)
    ax.plot([0, 1], [0, 1], color='gray', linestyle='--')
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel('f(z) probability of the predicted class')
    ax.set_ylabel('f(z_hat) probability of the same class')
    ax.grid(True)
    ax.set_title(
        f'Output fidelity (agreement {report.agreement:.1%}, '
        f'mean KL {report.mean_kl:.3f})'
    )
    _finish(fig, output_path)
