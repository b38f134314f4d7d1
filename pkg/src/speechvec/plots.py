"""Figure rendering for the report paths. Every CLI command that writes a
machine-readable report also drops a PNG next to it; the Agg backend keeps
this headless-safe."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_STAGE_COLORS = {
    "pre": "tab:blue",
    "fine": "tab:orange",
    "asr": "tab:green",
    "projection": "tab:red",
}


def save_training_curves(rows, path):
    """Loss and learning-rate traces, one panel each, colored by stage."""
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(7, 5.5), sharex=False)
    offset = 0
    for stage in ("pre", "fine", "asr", "projection"):
        stage_rows = [r for r in rows if r["stage"] == stage]
        if not stage_rows:
            continue
        xs = [offset + r["step"] for r in stage_rows]
        color = _STAGE_COLORS.get(stage, "gray")
        ax_loss.plot(xs, [r["loss"] for r in stage_rows], color=color,
                     label=stage, linewidth=1.0)
        ax_lr.plot(xs, [r["lr"] for r in stage_rows], color=color, linewidth=1.0)
        offset = xs[-1] + 1
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.legend(loc="upper right", fontsize=8)
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_chart(report_dict, path):
    """Top-1/Top-3 plus the per-task scores for one evaluated method."""
    scores = {"top1": report_dict["top1_acc"], "top3": report_dict["top3_acc"]}
    scores.update(report_dict["task_scores"])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = list(scores)
    values = [scores[n] for n in names]
    ax.bar(names, values, color="tab:blue")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"method={report_dict['method']}  wer={report_dict['wer']}")
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.2f}", ha="center", fontsize=8)
    ax.tick_params(axis="x", labelrotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_chart(bench_dict, path):
    """Median per-query latency per method."""
    methods = list(bench_dict["methods"])
    medians = [bench_dict["methods"][m]["median_s"] for m in methods]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.barh(methods, medians, color="tab:orange")
    ax.set_xlabel("median seconds per query")
    ratio = bench_dict.get("ours_vs_asr_ratio")
    if ratio is not None:
        ax.set_title(f"ours / asr_pipeline median ratio = {ratio:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_filter_chart(report_dict, path):
    """Survivor counts through the filter stages."""
    stages = report_dict["stages"]
    names = [s["stage"] for s in stages]
    n_in = [s["n_in"] for s in stages]
    n_out = [s["n_out"] for s in stages]
    fig, ax = plt.subplots(figsize=(6.5, 3.2))
    x = range(len(names))
    ax.bar([i - 0.2 for i in x], n_in, width=0.4, label="in", color="tab:gray")
    ax.bar([i + 0.2 for i in x], n_out, width=0.4, label="kept", color="tab:green")
    ax.set_xticks(list(x), names)
    ax.set_ylabel("utterances")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
