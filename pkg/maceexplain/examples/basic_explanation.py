"""
Example walkthrough of the library API on the synthetic dataset.

Trains a small toy classifier, learns MACE concepts for it, prunes them and
writes explanations and evaluation reports into ./mace_example.
"""
import os

from maceexplain.src.config import EvalConfig, PruneConfig, TrainConfig
from maceexplain.src.evaluator import (
    faithfulness_sweep,
    output_fidelity,
    rank_analytics,
)
from maceexplain.src.explainer import explain, write_bundle
from maceexplain.src.pruner import prune_and_finetune
from maceexplain.src.synthetic import (
    class_names_for,
    generate_synthetic_dataset,
    split_dataset,
)
from maceexplain.src.toy_training import train_toy_classifier
from maceexplain.src.trainer import train
from maceexplain.src.visualization import plot_faithfulness, plot_loss_curves

OUTPUT_DIR = "mace_example"


def build_blackbox(seed=0):
    """
    Generates four motif classes and trains the toy classifier on them.

    Returns:
        Tuple of (black box, training images, held-out images)
    """
    images = generate_synthetic_dataset(
        num_classes=4, per_class=60, seed=7, image_size=32
    )
    blackbox = train_toy_classifier(
        images,
        epochs=20,
        seed=seed,
        class_names=class_names_for(4),
        final_depth=8,
        min_accuracy=None,
    )
    train_set, held_out = split_dataset(images, 0.2, seed)
    return blackbox, train_set, held_out


def train_and_prune(blackbox, train_set, held_out):
    """Learns five concepts per class, then removes the unreliable ones."""
    config = TrainConfig(
        num_concepts=5, embed_dim=16, epochs=20, learning_rate=1e-3,
        batch_size=32,
    )
    model, report = train(blackbox, train_set, config)
    plot_loss_curves(report, os.path.join(OUTPUT_DIR, "loss_curves.png"))
    print(f"Loss ratio after training: {report.loss_ratio:.3f}")

    pruned, prune_report, _ = prune_and_finetune(
        model, blackbox, train_set, held_out,
        PruneConfig(fine_tune_epochs=4), config,
    )
    print(prune_report.format_table())
    return pruned


def evaluate(model, blackbox, held_out):
    settings = EvalConfig()
    fidelity = output_fidelity(model, blackbox, held_out)
    print(f"Argmax agreement: {fidelity.agreement:.1%}")

    ranks = rank_analytics(model, blackbox, held_out)
    print(f"AVG True above AVG Others: "
          f"{ranks.true_above_others_fraction:.1%}")

    faithfulness = faithfulness_sweep(
        model, blackbox, held_out, settings.thresholds, settings.seeds
    )
    print(faithfulness.summary())
    plot_faithfulness(
        faithfulness, os.path.join(OUTPUT_DIR, "faithfulness.png")
    )


def explain_first_image(model, blackbox, held_out):
    image = held_out[0]
    bundle = explain(model, blackbox, image, image.label, threshold=0.5)
    for concept in bundle.positive:
        print(f"  concept {concept.concept}: relevance "
              f"{concept.relevance:.3f}, coverage {concept.mask.coverage:.1%}")
    write_bundle(bundle, image, os.path.join(OUTPUT_DIR, "explanation"))


if __name__ == "__main__":
    os.makedirs(os.path.join(OUTPUT_DIR, "explanation"), exist_ok=True)

    print("\nTraining the toy black box:")
    blackbox, train_set, held_out = build_blackbox()

    print("\nTraining and pruning MACE:")
    model = train_and_prune(blackbox, train_set, held_out)

    print("\nEvaluating:")
    evaluate(model, blackbox, held_out)

    print("\nExplaining one held-out image:")
    explain_first_image(model, blackbox, held_out)
