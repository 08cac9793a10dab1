"""Report rendering: delimited outputs plus matplotlib figures written next
to them (scene top views, tracking error traces, the failure-flow diagram).
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import Circle, Polygon, Rectangle

from .motion import fk_batch

FAILURE_COLORS = {
    "grasp": "#d62728",
    "scene_completion": "#ff7f0e",
    "vlm": "#9467bd",
    "planner": "#8c564b",
    "motion": "#e377c2",
    "tracking": "#7f7f7f",
    "unclassifiable": "#bcbd22",
}


def scene_topview(scene, path, belief=None, plan=None, title=None):
    """Top-down drawing of the table, objects, belief hulls, and EE trace."""
    fig, ax = plt.subplots(figsize=(6.4, 5.4))
    x0, x1, y0, y1 = scene.table_bounds
    ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, facecolor="#f4ead8",
                           edgecolor="#b8a888", zorder=0))
    for obj in scene.objects:
        verts = obj.world_vertices()
        color = obj.color if obj.color else "#6699cc"
        try:
            ax.add_patch(Polygon(verts, closed=True, facecolor=color,
                                 edgecolor="black", alpha=0.75, zorder=2))
        except ValueError:
            ax.add_patch(Polygon(verts, closed=True, facecolor="#6699cc",
                                 edgecolor="black", alpha=0.75, zorder=2))
        c = obj.world_centroid()
        ax.annotate(obj.name, c, fontsize=7, ha="center", zorder=5)
    if belief is not None:
        for bo in belief.objects.values():
            ax.add_patch(Polygon(bo.hull.vertices, closed=True, fill=False,
                                 edgecolor="#2266aa", linestyle="--", zorder=3))
            for center, radius in zip(bo.discs_world.centers, bo.discs_world.radii):
                ax.add_patch(Circle(center, radius, fill=False,
                                    edgecolor="#88aacc", linewidth=0.5, zorder=3))
    if plan is not None:
        ee = fk_batch(scene.arm, plan.trajectory.q)[:, :2]
        ax.plot(ee[:, 0], ee[:, 1], color="#117733", linewidth=1.0, zorder=4,
                label="planned EE path")
        ax.legend(loc="upper left", fontsize=7)
    ax.plot(*scene.arm.base_xy, marker="s", color="black", markersize=8, zorder=5)
    ax.set_xlim(min(-0.05, x0 - 0.05), x1 + 0.08)
    ax.set_ylim(y0 - 0.08, y1 + 0.08)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title or scene.name)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def tracking_figure(outcome, traj, path):
    """Joint tracking error and EE error over the executed trajectory."""
    fig, axes = plt.subplots(2, 1, figsize=(6.4, 4.8), sharex=True)
    t = traj.t
    for j in range(3):
        axes[0].plot(t, outcome.tracked[:, j], label=f"joint {j + 1}")
    axes[0].set_ylabel("joint error [rad]")
    axes[0].legend(fontsize=7)
    axes[1].plot(t, outcome.ee_error * 1000.0, color="#cc3311")
    axes[1].axhline(5.0, color="gray", linestyle=":")
    axes[1].set_ylabel("EE error [mm]")
    axes[1].set_xlabel("t [s]")
    for ev in outcome.grasp_events:
        axes[1].axvline(ev.t, color="#117733" if ev.success else "#d62728",
                        linestyle="--", linewidth=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def tracking_csv(outcome, traj, path):
    """Per-sample tracking log: t, q1..q3, qd1..qd3, g."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "q1", "q2", "q3", "qd1", "qd2", "qd3", "g"])
        for i in range(len(traj)):
            writer.writerow(
                [f"{traj.t[i]:.6f}"]
                + [f"{v:.9f}" for v in outcome.q_history[i]]
                + [f"{v:.9f}" for v in traj.q[i]]
                + [int(traj.g[i])]
            )


def depth_figure(obs, path):
    fig, ax = plt.subplots(figsize=(6.0, 4.6))
    img = ax.imshow(obs.depth, cmap="viridis")
    fig.colorbar(img, ax=ax, label="depth [m]")
    ax.set_title("rendered depth")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def flow_figure(aggregate, path):
    """Trials -> outcome flow in the spirit of a Sankey band diagram."""
    flow = aggregate["flow"]
    total = max(flow["trials"], 1)
    outcomes = [("success", flow["success"], "#117733")]
    for cls, count in flow["failures"].items():
        outcomes.append((cls, count, FAILURE_COLORS.get(cls, "#999999")))

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.barh([0], [total], height=0.5, color="#99bbdd", edgecolor="black")
    ax.annotate(f"trials ({total})", (total / 2, 0), ha="center", va="center")
    y = 0.0
    left_edge = 0.0
    for name, count, color in outcomes:
        if count == 0:
            continue
        width = count
        ax.barh([1.2], [width], left=[left_edge], height=0.5, color=color,
                edgecolor="black")
        ax.annotate(f"{name} ({count})", (left_edge + width / 2, 1.2),
                    ha="center", va="center", fontsize=8, rotation=0)
        # connecting band
        ax.fill_betweenx([0.25, 0.95], [left_edge, left_edge],
                         [left_edge + width, left_edge + width],
                         color=color, alpha=0.25)
        left_edge += width
        y += width
    ax.set_xlim(-0.5, total + 0.5)
    ax.set_ylim(-0.5, 1.8)
    ax.set_yticks([])
    ax.set_xlabel("trials")
    ax.set_title("trial outcomes by module")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def summary_csv(aggregate, path):
    """Per-scene SR/TP rows plus the overall footer."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "sr", "sr_num", "sr_den", "tp"])
        for row in aggregate["scenes"]:
            writer.writerow([row["scene"], row["sr"], row["sr_num"],
                             row["sr_den"], f"{row['tp']:.1f}"])
        overall = aggregate["overall"]
        writer.writerow(["overall", overall["sr"], overall["sr_num"],
                         overall["sr_den"], f"{overall['tp']:.1f}"])


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
