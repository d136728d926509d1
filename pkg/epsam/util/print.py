from pathlib import Path
from typing import Optional, Sequence, Set, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import networkx as nx
from matplotlib.figure import Figure


def print_stage_graph(
    graph: nx.DiGraph,
    current_node_id: str,
    prefix: str = "",
    is_last: bool = True,
    visited: Optional[Set[str]] = None,
) -> None:
    """
    Recursively prints the stage DAG with visual connectors, status and outputs.
    """
    if visited is None:
        visited = set()

    connector = "└── " if is_last else "├── "
    new_prefix = prefix + ("    " if is_last else "│   ")

    node_attrs = graph.nodes[current_node_id]
    status = node_attrs.get("status", "pending")
    outputs = node_attrs.get("outputs", [])
    inputs_hash = node_attrs.get("inputs_hash", "")

    node_label = f"[{status}] {current_node_id}"
    if inputs_hash:
        node_label += f" [inputs: {inputs_hash[:12]}]"
    if outputs:
        node_label += f"\n{new_prefix}    [outputs: {len(outputs)}]"

    print(f"{prefix}{connector}{node_label}", flush=True)
    visited.add(current_node_id)

    children = list(graph.successors(current_node_id))
    for i, child_id in enumerate(children):
        is_last_child = i == len(children) - 1
        if child_id in visited:
            loop_connector = "└── " if is_last_child else "├── "
            print(f"{new_prefix}{loop_connector}(Already shown) {child_id}", flush=True)
        else:
            print_stage_graph(graph, child_id, prefix=new_prefix, is_last=is_last_child, visited=visited)


def print_stage_status(stage: str, status: str, detail: str = "") -> None:
    line = f"[{status}] {stage}"
    if detail:
        line += f": {detail}"
    print(line, flush=True)


def format_metrics_table(rows: Sequence[Tuple[str, float, float, int]]) -> str:
    """Fixed column order: phase, Dice, IoU, n_selected."""
    lines = [f"{'phase':<14}{'Dice':>10}{'IoU':>10}{'n_selected':>12}"]
    for phase, dice, iou, n_selected in rows:
        lines.append(f"{phase:<14}{dice:>10.2f}{iou:>10.2f}{n_selected:>12d}")
    return "\n".join(lines)


def print_metrics_table(rows: Sequence[Tuple[str, float, float, int]]) -> None:
    print(format_metrics_table(rows), flush=True)


def plot_trends(phases: Sequence[str], dice: Sequence[float], iou: Sequence[float]) -> Figure:
    """
    Dice and IoU against retraining phase, one x tick per phase.
    """
    figure, ax = plt.subplots(figsize=(5, 3.5))
    positions = list(range(len(phases)))
    ax.plot(positions, dice, marker="o", label="Dice (%)")
    ax.plot(positions, iou, marker="s", label="IoU (%)")
    ax.set_xticks(positions)
    ax.set_xticklabels([str(p) for p in phases])
    ax.set_xlabel("phase")
    ax.set_ylabel("score (%)")
    ax.set_title("Pseudo-label quality per iteration")
    ax.legend()
    figure.tight_layout()
    return figure


def save_trend_plot(
    phases: Sequence[str],
    dice: Sequence[float],
    iou: Sequence[float],
    path: Union[str, Path],
) -> Path:
    figure = plot_trends(phases, dice, iou)
    figure.savefig(path, dpi=100)
    plt.close(figure)
    return Path(path)
