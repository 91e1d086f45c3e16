import functools
import logging
import os
import traceback
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional

import click

from maceexplain.src.blackbox import LabeledImage, ToyBlackBox
from maceexplain.src.config import (
    PRESETS,
    DatasetConfig,
    MaceConfig,
    ToyConfig,
    TrainConfig,
)
from maceexplain.src.errors import CheckpointError, MaceError
from maceexplain.src.evaluator import (
    ablation_compare,
    faithfulness_sweep,
    output_fidelity,
    rank_analytics,
    robustness_sweep,
    stability_matrix,
)
from maceexplain.src.explainer import (
    UPSCALE_MODES,
    explain as explain_image,
    explain_top_classes,
    write_bundle,
    write_concept_grid,
)
from maceexplain.src.mace import MaceModel
from maceexplain.src.perturbations import perturbation_grid
from maceexplain.src.pruner import prune_and_finetune, write_prototype_grid
from maceexplain.src.reconstruction import KLDirection
from maceexplain.src.relevance import RelevanceLossMode
from maceexplain.src.runs import (
    OUTPUT_ROOT_ENV,
    RunManifest,
    default_output_root,
    load_or_generate_dataset,
    load_or_train_blackbox,
    prepare_output_dir,
    split_for,
)
from maceexplain.src.trainer import train as train_mace
from maceexplain.src.visualization import (
    plot_ablation,
    plot_distance_matrix,
    plot_faithfulness,
    plot_fidelity,
    plot_loss_curves,
    plot_relevance_ranks,
    plot_robustness,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def handle_errors(command):
    """Turns library errors into an error message and a nonzero exit."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (click.ClickException, click.Abort):
            raise
        except (MaceError, ValueError) as e:
            click.echo(f"Error: {str(e)}")
            raise click.Abort()
        except Exception as e:
            click.echo(f"Unexpected error: {str(e)}")
            ctx = click.get_current_context()
            if (ctx.find_root().obj or {}).get("verbose"):
                click.echo("\nDetailed error information:")
                click.echo(traceback.format_exc())
            raise click.Abort()
    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Detailed output")
@click.option(
    "--output-root",
    type=click.Path(file_okay=False),
    default=default_output_root,
    help=f"Root for caches and runs (env {OUTPUT_ROOT_ENV})",
)
@click.pass_context
def cli(ctx, verbose, output_root):
    """maceexplain - concept explanations for image classifiers."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format=LOG_FORMAT,
    )
    ctx.obj = {"verbose": verbose, "root": output_root}


def _load_config(
    config_path: Optional[str], preset: Optional[str] = None
) -> MaceConfig:
    config = (
        MaceConfig.from_json_file(config_path) if config_path
        else MaceConfig()
    )
    if preset:
        config = config.with_preset(preset)
    return config


def _start_run(
    command: str,
    run_dir: str,
    config: MaceConfig,
    seeds: Dict[str, int],
) -> RunManifest:
    """Creates the run directory and writes the effective config."""
    prepare_output_dir(run_dir)
    config_path = os.path.join(run_dir, "config.json")
    config.to_json_file(config_path)
    manifest = RunManifest(
        command=command,
        output_dir=run_dir,
        config_path=config_path,
        seeds=seeds,
    )
    manifest.add(config_path)
    return manifest


@dataclass
class Session:
    """A trained checkpoint with the black box and data it was trained on."""
    model: MaceModel
    blackbox: ToyBlackBox
    config: MaceConfig
    images: List[LabeledImage]
    train_set: List[LabeledImage]
    held_out: List[LabeledImage]

    def eval_images(self) -> List[LabeledImage]:
        limit = self.config.eval.max_images
        return self.held_out if limit is None else self.held_out[:limit]

    def find_image(self, image_id: int) -> LabeledImage:
        for image in self.images:
            if image.image_id == image_id:
                return image
        raise ValueError(f"No image with id {image_id}")


def _load_session(
    root: str, checkpoint: str, config: MaceConfig
) -> Session:
    model = MaceModel.load(checkpoint, require_trained=True)
    workspace = model.metadata.get("workspace")
    if not workspace:
        raise CheckpointError(
            f"Checkpoint {checkpoint} does not record its black box and "
            "dataset"
        )
    config = replace(
        config,
        dataset=DatasetConfig(**workspace["dataset"]),
        toy=ToyConfig(**workspace["toy"]),
    )
    blackbox = ToyBlackBox.load(workspace["blackbox"])
    images, _, _ = load_or_generate_dataset(root, config.dataset)
    train_set, held_out = split_for(config, images)
    return Session(model, blackbox, config, images, train_set, held_out)


def _training_seed(session: Session) -> int:
    """The seed the checkpoint was trained with, else the configured one."""
    recorded = session.model.metadata.get("train_config") or {}
    return int(recorded.get("seed", session.config.train.seed))


def _run_dir(root: str, run_dir: Optional[str], default: str) -> str:
    return run_dir or os.path.join(root, "runs", default)


@cli.command()
@click.option("--classes", type=int, required=True,
              help="Number of classes")
@click.option("--per-class", type=int, required=True,
              help="Images per class")
@click.option("--seed", type=int, required=True, help="Generation seed")
@click.option("--image-size", type=int, default=64, show_default=True,
              help="Image height and width in pixels")
@click.pass_context
@handle_errors
def dataset(ctx, classes, per_class, seed, image_size):
    """Generates and caches the synthetic dataset."""
    config = DatasetConfig(
        num_classes=classes,
        per_class=per_class,
        seed=seed,
        image_size=image_size,
    )
    prepare_output_dir(ctx.obj["root"])
    images, path, hit = load_or_generate_dataset(ctx.obj["root"], config)
    if hit:
        click.echo(f"Cache hit: {path}")
    else:
        click.echo(f"Cached {len(images)} images at {path}")
    counts: Dict[int, int] = {}
    for image in images:
        counts[image.label] = counts.get(image.label, 0) + 1
    for label in sorted(counts):
        click.echo(f"  class {label}: {counts[label]} images")


@cli.command()
@click.option("-c", "--config", "config_path",
              type=click.Path(dir_okay=False), help="JSON config file")
@click.option("--preset", type=click.Choice(sorted(PRESETS)),
              help="Named learning rate and epoch setting")
@click.option("--seed", type=int, help="Training seed")
@click.option("-e", "--epochs", type=int, help="Training epochs")
@click.option("--learning-rate", type=float, help="Adam learning rate")
@click.option("--num-concepts", type=int, help="Concepts per class")
@click.option("--embed-dim", type=int, help="Embedding width")
@click.option("--batch-size", type=int, help="Mini-batch size")
@click.option("--no-lo", is_flag=True, help="Drop the output divergence")
@click.option("--no-ld", is_flag=True, help="Drop the reconstruction loss")
@click.option("--relevance-loss-mode",
              type=click.Choice([m.value for m in RelevanceLossMode]))
@click.option("--kl-direction",
              type=click.Choice([d.value for d in KLDirection]))
@click.option("--checkpoint-every", type=int,
              help="Write a checkpoint every N epochs")
@click.option("--run-dir", type=click.Path(file_okay=False),
              help="Output directory of this run")
@click.option("-p", "--plot", is_flag=True, help="Plot the loss curves")
@click.pass_context
@handle_errors
def train(
    ctx,
    config_path,
    preset,
    seed,
    epochs,
    learning_rate,
    num_concepts,
    embed_dim,
    batch_size,
    no_lo,
    no_ld,
    relevance_loss_mode,
    kl_direction,
    checkpoint_every,
    run_dir,
    plot,
):
    """Trains the toy black box if needed, then MACE."""
    root = ctx.obj["root"]
    config = _load_config(config_path, preset).with_overrides(
        "train",
        seed=seed,
        epochs=epochs,
        learning_rate=learning_rate,
        num_concepts=num_concepts,
        embed_dim=embed_dim,
        batch_size=batch_size,
        use_lo=False if no_lo else None,
        use_ld=False if no_ld else None,
        relevance_loss_mode=relevance_loss_mode,
        kl_direction=kl_direction,
        checkpoint_every=checkpoint_every,
    )
    settings = config.train
    run_dir = _run_dir(root, run_dir, f"train_seed{settings.seed}")
    manifest = _start_run("train", run_dir, config, {
        "dataset": config.dataset.seed,
        "toy": config.toy.seed,
        "train": settings.seed,
    })

    images, _, _ = load_or_generate_dataset(root, config.dataset)
    blackbox, blackbox_file, hit = load_or_train_blackbox(
        root, config, images
    )
    if not hit:
        click.echo(f"Trained toy black box: {blackbox_file}")
    train_set, _ = split_for(config, images)

    model = MaceModel.uniform(
        blackbox.spec, settings.num_concepts, settings.embed_dim,
        settings.seed,
    )
    model.metadata["workspace"] = {
        "blackbox": blackbox_file,
        "dataset": asdict(config.dataset),
        "toy": asdict(config.toy),
    }
    model, report = train_mace(
        blackbox, train_set, settings, model=model,
        checkpoint_dir=run_dir if settings.checkpoint_every else None,
    )
    checkpoint = os.path.join(run_dir, "mace.npz")
    model.save(checkpoint)
    manifest.checkpoints = [blackbox_file, *report.checkpoints, checkpoint]
    manifest.add(*report.checkpoints, checkpoint)
    manifest.add(*report.write(os.path.join(run_dir, "train_report")))
    if plot:
        plot_path = os.path.join(run_dir, "loss_curves.png")
        plot_loss_curves(report, plot_path)
        manifest.add(plot_path)
    manifest.write()

    if report.epochs:
        click.echo(
            f"Trained {len(report.epochs)} epochs: total loss "
            f"{report.initial_total:.4f} -> {report.final_total:.4f}"
        )
    click.echo(f"Checkpoint: {checkpoint}")


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False),
              required=True, help="Trained MACE checkpoint")
@click.option("-c", "--config", "config_path",
              type=click.Path(dir_okay=False), help="JSON config file")
@click.option("--top-t", type=int, help="Top images checked by rule 1")
@click.option("--mismatch-s", type=int,
              help="Off-class images tolerated among the top images")
@click.option("--fine-tune-epochs", type=int, help="Epochs after pruning")
@click.option("--mask-threshold", type=float,
              help="Threshold of the coverage rule")
@click.option("--run-dir", type=click.Path(file_okay=False),
              help="Output directory of this run")
@click.option("--prototypes", is_flag=True,
              help="Write a top-image grid for every concept")
@click.pass_context
@handle_errors
def prune(
    ctx,
    checkpoint,
    config_path,
    top_t,
    mismatch_s,
    fine_tune_epochs,
    mask_threshold,
    run_dir,
    prototypes,
):
    """Applies the pruning rules to a checkpoint and fine-tunes it."""
    root = ctx.obj["root"]
    config = _load_config(config_path).with_overrides(
        "prune",
        top_t=top_t,
        mismatch_s=mismatch_s,
        fine_tune_epochs=fine_tune_epochs,
        mask_threshold=mask_threshold,
    )
    session = _load_session(root, checkpoint, config)
    train_config = TrainConfig(**session.model.metadata["train_config"])
    config = replace(session.config, train=train_config)
    run_dir = _run_dir(root, run_dir, "prune")
    manifest = _start_run("prune", run_dir, config, {
        "dataset": config.dataset.seed,
        "toy": config.toy.seed,
        "train": train_config.seed,
    })

    pruned, report, fine_tune = prune_and_finetune(
        session.model,
        session.blackbox,
        session.train_set,
        session.held_out,
        config.prune,
        train_config,
        upscale_mode=config.eval.upscale_mode,
    )
    pruned_path = os.path.join(run_dir, "mace_pruned.npz")
    pruned.save(pruned_path)
    manifest.checkpoints = [checkpoint, pruned_path]
    manifest.add(pruned_path)
    manifest.add(*report.write(os.path.join(run_dir, "prune_report")))
    if fine_tune is not None:
        manifest.add(*fine_tune.write(
            os.path.join(run_dir, "fine_tune_report")
        ))

    if prototypes:
        grid_dir = prepare_output_dir(os.path.join(run_dir, "prototypes"))
        names = session.blackbox.spec.class_names
        for verdict in report.verdicts:
            status = "pruned" if verdict.pruned else "kept"
            path = os.path.join(
                grid_dir,
                f"{names[verdict.class_index]}_c{verdict.concept}"
                f"_{status}.png",
            )
            manifest.add(write_prototype_grid(
                session.model,
                session.blackbox,
                session.held_out,
                verdict.class_index,
                verdict.concept,
                path,
                top_t=config.prune.top_t,
                upscale_mode=config.eval.upscale_mode,
            ))
    manifest.write()

    click.echo(report.format_table())
    click.echo(f"Pruned checkpoint: {pruned_path}")


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False),
              required=True, help="Trained MACE checkpoint")
@click.option("--image", "image_id", type=int, required=True,
              help="Image id in the dataset")
@click.option("--class", "class_name",
              help="Class name or index; the predicted class if omitted")
@click.option("-c", "--config", "config_path",
              type=click.Path(dir_okay=False), help="JSON config file")
@click.option("-t", "--threshold", type=float,
              help="Heatmap threshold; prune.mask_threshold if omitted")
@click.option("--top-classes", type=int,
              help="Explain the black box's top N classes instead")
@click.option("--upscale-mode", type=click.Choice(UPSCALE_MODES),
              help="Map interpolation")
@click.option("--run-dir", type=click.Path(file_okay=False),
              help="Output directory of this run")
@click.pass_context
@handle_errors
def explain(
    ctx,
    checkpoint,
    image_id,
    class_name,
    config_path,
    threshold,
    top_classes,
    upscale_mode,
    run_dir,
):
    """Writes concept overlays, masks and a JSON summary for one image."""
    root = ctx.obj["root"]
    session = _load_session(root, checkpoint, _load_config(config_path))
    if threshold is None:
        threshold = session.config.prune.mask_threshold
    upscale_mode = upscale_mode or session.config.eval.upscale_mode
    image = session.find_image(image_id)
    model, blackbox = session.model, session.blackbox

    if top_classes:
        bundles = explain_top_classes(
            model, blackbox, image, top_classes, threshold, upscale_mode
        )
    else:
        if class_name is None:
            probs = blackbox.predict_proba(image.pixels[None])[0]
            class_name = str(int(probs.argmax()))
        bundles = [explain_image(
            model, blackbox, image, class_name, threshold, upscale_mode
        )]

    run_dir = _run_dir(root, run_dir, f"explain_image{image_id}")
    manifest = _start_run(
        "explain", run_dir, session.config,
        {"dataset": session.config.dataset.seed},
    )
    manifest.checkpoints = [checkpoint]
    for bundle in bundles:
        bundle_dir = prepare_output_dir(os.path.join(
            run_dir, f"{image_id}_{bundle.class_name}"
        ))
        manifest.add(*write_bundle(bundle, image, bundle_dir))
        manifest.add(write_concept_grid(
            [(image.pixels, c.heatmap) for c in bundle.concepts],
            os.path.join(bundle_dir, "grid.png"),
            titles=[f"c{c.concept} r={c.relevance:.3f}"
                    for c in bundle.concepts],
        ))
        click.echo(
            f"{bundle.class_name}: p={bundle.class_probability:.3f}, "
            f"{len(bundle.positive)} positive concepts, "
            f"union covers {bundle.union.coverage:.1%}"
        )
    manifest.write()
    click.echo(f"Explanations written to {run_dir}")


@cli.group(name="eval")
def evaluate():
    """Quantitative evaluation of a trained checkpoint."""


def _eval_options(command):
    command = click.option(
        "-p", "--plot", is_flag=True, help="Plot the report"
    )(command)
    command = click.option(
        "--run-dir", type=click.Path(file_okay=False),
        help="Output directory of this run",
    )(command)
    command = click.option(
        "-c", "--config", "config_path",
        type=click.Path(dir_okay=False), help="JSON config file",
    )(command)
    return click.option(
        "--checkpoint", type=click.Path(dir_okay=False), required=True,
        help="Trained MACE checkpoint",
    )(command)


def _eval_run(
    ctx, name: str, checkpoint: str, config_path: Optional[str],
    run_dir: Optional[str],
):
    root = ctx.obj["root"]
    session = _load_session(root, checkpoint, _load_config(config_path))
    run_dir = _run_dir(root, run_dir, f"eval_{name}")
    manifest = _start_run(
        f"eval {name}", run_dir, session.config,
        {"dataset": session.config.dataset.seed,
         "noise": session.config.eval.noise_seed},
    )
    manifest.checkpoints = [checkpoint]
    return session, run_dir, manifest


@evaluate.command()
@_eval_options
@click.pass_context
@handle_errors
def faithfulness(ctx, checkpoint, config_path, run_dir, plot):
    """Probability drop of masked images, MACE against random concepts."""
    session, run_dir, manifest = _eval_run(
        ctx, "faithfulness", checkpoint, config_path, run_dir
    )
    settings = session.config.eval
    report = faithfulness_sweep(
        session.model,
        session.blackbox,
        session.eval_images(),
        thresholds=settings.thresholds,
        baseline_seeds=settings.seeds,
        fill=settings.fill,
        upscale_mode=settings.upscale_mode,
    )
    manifest.add(*report.write(os.path.join(run_dir, "faithfulness")))
    if plot:
        plot_path = os.path.join(run_dir, "faithfulness.png")
        plot_faithfulness(report, plot_path)
        manifest.add(plot_path)
    manifest.write()
    click.echo(report.summary().to_string())


@evaluate.command()
@_eval_options
@click.pass_context
@handle_errors
def robustness(ctx, checkpoint, config_path, run_dir, plot):
    """IoU of union masks before and after perturbations."""
    session, run_dir, manifest = _eval_run(
        ctx, "robustness", checkpoint, config_path, run_dir
    )
    settings = session.config.eval
    report = robustness_sweep(
        session.model,
        session.blackbox,
        session.eval_images(),
        perturbation_grid(settings),
        thresholds=settings.thresholds,
        noise_seed=settings.noise_seed,
        upscale_mode=settings.upscale_mode,
    )
    manifest.add(*report.write(os.path.join(run_dir, "robustness")))
    if plot:
        plot_path = os.path.join(run_dir, "robustness.png")
        plot_robustness(report, output_path=plot_path)
        manifest.add(plot_path)
    manifest.write()
    click.echo(report.summary().to_string(index=False))


@evaluate.command()
@_eval_options
@click.option("--class", "class_name", help="Class name or index")
@click.pass_context
@handle_errors
def stability(ctx, checkpoint, config_path, run_dir, plot, class_name):
    """Embedding distance matrix of several concepts over several images."""
    session, run_dir, manifest = _eval_run(
        ctx, "stability", checkpoint, config_path, run_dir
    )
    settings = session.config.eval
    spec = session.blackbox.spec
    if class_name is not None:
        class_index = spec.class_index(class_name)
    else:
        class_index = settings.stability_class or 0
    report = stability_matrix(
        session.model,
        session.blackbox,
        session.eval_images(),
        class_index,
        num_images=settings.stability_images,
        num_concepts=settings.stability_concepts,
        seed=_training_seed(session),
    )
    manifest.add(*report.write(os.path.join(run_dir, "stability")))
    if plot:
        plot_path = os.path.join(run_dir, "stability.png")
        plot_distance_matrix(report, plot_path)
        manifest.add(plot_path)
    manifest.write()
    click.echo(
        f"{spec.class_names[class_index]}: intra-concept distance "
        f"{report.intra_mean:.4f}, inter-concept {report.inter_mean:.4f}"
    )


@evaluate.command()
@_eval_options
@click.pass_context
@handle_errors
def relevance(ctx, checkpoint, config_path, run_dir, plot):
    """Relevance rank analytics of true-class against other images."""
    session, run_dir, manifest = _eval_run(
        ctx, "relevance", checkpoint, config_path, run_dir
    )
    report = rank_analytics(
        session.model,
        session.blackbox,
        session.eval_images(),
        denominator=session.config.eval.rank_denominator,
    )
    manifest.add(*report.write(os.path.join(run_dir, "relevance")))
    if plot:
        plot_path = os.path.join(run_dir, "relevance.png")
        plot_relevance_ranks(report, plot_path)
        manifest.add(plot_path)
    manifest.write()
    click.echo(
        "Concepts with AVG True above AVG Others: "
        f"{report.true_above_others_fraction:.1%}"
    )


@evaluate.command()
@_eval_options
@click.pass_context
@handle_errors
def fidelity(ctx, checkpoint, config_path, run_dir, plot):
    """Agreement of the black box on reconstructed dense features."""
    session, run_dir, manifest = _eval_run(
        ctx, "fidelity", checkpoint, config_path, run_dir
    )
    report = output_fidelity(
        session.model, session.blackbox, session.eval_images()
    )
    manifest.add(*report.write(os.path.join(run_dir, "fidelity")))
    if plot:
        plot_path = os.path.join(run_dir, "fidelity.png")
        plot_fidelity(report, plot_path)
        manifest.add(plot_path)
    manifest.write()
    click.echo(
        f"Argmax agreement {report.agreement:.1%}, "
        f"mean KL {report.mean_kl:.4f}"
    )


@evaluate.command()
@click.option("-c", "--config", "config_path",
              type=click.Path(dir_okay=False), help="JSON config file")
@click.option("--preset", type=click.Choice(sorted(PRESETS)),
              help="Training setting shared by all variants; the "
                   "configured train section if omitted")
@click.option("--seeds", type=int, multiple=True,
              help="Training seeds; the configured ones if omitted")
@click.option("--run-dir", type=click.Path(file_okay=False),
              help="Output directory of this run")
@click.option("-p", "--plot", is_flag=True, help="Plot the report")
@click.pass_context
@handle_errors
def ablation(ctx, config_path, preset, seeds, run_dir, plot):
    """Faithfulness of full MACE against variants without L^O or L^D."""
    root = ctx.obj["root"]
    config = _load_config(config_path, preset)
    if seeds:
        config = config.with_overrides("eval", ablation_seeds=tuple(seeds))
    settings = config.eval
    run_dir = _run_dir(root, run_dir, "eval_ablation")
    manifest = _start_run("eval ablation", run_dir, config, {
        "dataset": config.dataset.seed,
        "toy": config.toy.seed,
        **{f"train_{s}": s for s in settings.ablation_seeds},
    })

    images, _, _ = load_or_generate_dataset(root, config.dataset)
    blackbox, blackbox_file, _ = load_or_train_blackbox(root, config, images)
    manifest.checkpoints = [blackbox_file]
    train_set, held_out = split_for(config, images)
    if settings.max_images is not None:
        held_out = held_out[:settings.max_images]

    report = ablation_compare(
        blackbox,
        train_set,
        held_out,
        config.train,
        thresholds=settings.thresholds,
        seeds=settings.ablation_seeds,
        fill=settings.fill,
        upscale_mode=settings.upscale_mode,
    )
    manifest.add(*report.write(os.path.join(run_dir, "ablation")))
    if plot:
        plot_path = os.path.join(run_dir, "ablation.png")
        plot_ablation(report, plot_path)
        manifest.add(plot_path)
    manifest.write()
    click.echo(report.summary().to_string())


if __name__ == "__main__":
    cli()
