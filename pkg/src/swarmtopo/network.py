"""Network model for first-order consensus formations.

A formation is a directed listening graph over ``n`` robots plus a desired
shape and a leader that carries the reference velocity. The one-step update
matrix is row stochastic (identity minus the scaled Laplacian), so the whole
simulation and all downstream estimators reduce to linear algebra on it.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NetworkSpec",
    "StabilityReport",
    "build_perron",
    "check_stability",
    "formation_input",
    "left_perron",
    "network_from_text",
    "network_to_text",
    "random_network",
    "read_network",
    "write_network",
]


# ---------------------------------------------------------------------------
# spec container


@dataclass
class NetworkSpec:
    """Static description of a formation network.

    Attributes
    ----------
    n : int
        Number of robots. Ids are 0-based everywhere, including files.
    adjacency : ndarray of shape (n, n)
        ``adjacency[i, j] > 0`` means robot i listens to robot j. Zero
        diagonal, nonnegative entries.
    shape : ndarray of shape (n, 2)
        Commanded formation offsets (meters). Only differences matter.
    leader : int
        Index of the robot that carries the reference velocity.
    leader_velocity : ndarray of shape (2,)
        Commanded velocity of the leader, meters per second.
    control_period : float
        Seconds per discrete step. Must not exceed 1 / max weighted
        in-degree or the update matrix leaves the stochastic simplex.
    interaction_range : float
        Maximum listening distance R_c the topology is consistent with.
    obstacle_range : float
        Distance R_o below which a robot reacts to an obstacle.
    """

    n: int
    adjacency: np.ndarray
    shape: np.ndarray
    leader: int
    leader_velocity: np.ndarray
    control_period: float
    interaction_range: float
    obstacle_range: float

    def __post_init__(self) -> None:
        self.adjacency = np.asarray(self.adjacency, dtype=float)
        self.shape = np.asarray(self.shape, dtype=float)
        self.leader_velocity = np.asarray(self.leader_velocity, dtype=float)
        if self.adjacency.shape != (self.n, self.n):
            raise ValueError(
                f"adjacency must be ({self.n}, {self.n}), got {self.adjacency.shape}"
            )
        if self.shape.shape != (self.n, 2):
            raise ValueError(f"shape must be ({self.n}, 2), got {self.shape.shape}")
        if self.leader_velocity.shape != (2,):
            raise ValueError("leader_velocity must have shape (2,)")
        if not (0 <= self.leader < self.n):
            raise ValueError(f"leader index {self.leader} out of range")
        if np.any(self.adjacency < 0):
            raise ValueError("adjacency weights must be nonnegative")
        if np.any(np.diag(self.adjacency) != 0):
            raise ValueError("adjacency diagonal must be zero")
        if not np.all(np.isfinite(self.adjacency)):
            raise ValueError("adjacency contains non-finite entries")
        if self.control_period <= 0:
            raise ValueError("control_period must be positive")
        max_degree = float(self.adjacency.sum(axis=1).max())
        if max_degree > 0 and self.control_period > 1.0 / max_degree + 1e-12:
            raise ValueError(
                "control_period too large for the weighted in-degrees: "
                f"{self.control_period} > 1/{max_degree}"
            )
        if self.interaction_range <= 0 or self.obstacle_range <= 0:
            raise ValueError("ranges must be positive")

    @property
    def in_degrees(self) -> np.ndarray:
        """Weighted in-degree (row sum of adjacency) per robot."""
        return self.adjacency.sum(axis=1)

    def out_neighbors(self, j: int) -> np.ndarray:
        """Indices of robots that listen to robot ``j``."""
        return np.flatnonzero(self.adjacency[:, j] > 0)

    def in_neighbors(self, i: int) -> np.ndarray:
        """Indices robot ``i`` listens to."""
        return np.flatnonzero(self.adjacency[i] > 0)


@dataclass
class StabilityReport:
    """Spectral summary of a one-step update matrix."""

    unit_multiplicity: int
    second_modulus: float
    stable: bool


# ---------------------------------------------------------------------------
# model construction


def build_perron(spec: NetworkSpec) -> np.ndarray:
    """Return the row-stochastic one-step update matrix.

    W = I - control_period * (D - A) with D the diagonal of weighted
    in-degrees. Row sums are exactly one by construction.
    """
    lap = np.diag(spec.in_degrees) - spec.adjacency
    return np.eye(spec.n) - spec.control_period * lap


def check_stability(w: np.ndarray, tol: float = 1e-9) -> StabilityReport:
    """Check that consensus converges: eigenvalue 1 simple, rest inside the disc.

    The unit eigenvalue is matched with absolute tolerance ``tol``; the report
    is ``stable`` when exactly one eigenvalue sits there and every other
    modulus is below ``1 - tol``.
    """
    w = np.asarray(w, dtype=float)
    eig = np.linalg.eigvals(w)
    order = np.argsort(-np.abs(eig))
    eig = eig[order]
    at_one = np.abs(eig - 1.0) <= tol
    unit_multiplicity = int(at_one.sum())
    rest = np.abs(eig[~at_one])
    second = float(rest.max()) if rest.size else 0.0
    stable = unit_multiplicity == 1 and second < 1.0 - tol
    return StabilityReport(unit_multiplicity, second, stable)


def left_perron(w: np.ndarray) -> np.ndarray:
    """Normalized left eigenvector of the unit eigenvalue.

    For a leader-rooted network (leader has no in-edges) this is the leader
    indicator; in general it weighs how much each robot's input shows up in
    the collective steady velocity.
    """
    w = np.asarray(w, dtype=float)
    eig, vectors = np.linalg.eig(w.T)
    idx = int(np.argmin(np.abs(eig - 1.0)))
    v = np.real(vectors[:, idx])
    s = v.sum()
    if abs(s) < 1e-12:
        raise ValueError("left eigenvector at 1 sums to zero; matrix not stochastic?")
    v = v / s
    return v


def formation_input(spec: NetworkSpec, w: np.ndarray) -> np.ndarray:
    """Constant per-step input that holds the shape and drives the leader.

    Returns an (n, 2) array: (I - W) shape + control_period * velocity on
    the leader row.
    """
    u = (np.eye(spec.n) - w) @ spec.shape
    u[spec.leader] += spec.control_period * spec.leader_velocity
    return u


# ---------------------------------------------------------------------------
# file format

_PARAM_KEYS = {
    "leader",
    "control_period",
    "leader_velocity",
    "interaction_range",
    "obstacle_range",
}


def network_to_text(spec: NetworkSpec) -> str:
    """Serialize a spec to the network file format."""
    buf = io.StringIO()
    buf.write("# swarmtopo network, ids are 0-based\n")
    buf.write(f"n {spec.n}\n")
    buf.write(f"leader {spec.leader}\n")
    buf.write(f"control_period {float(spec.control_period)!r}\n")
    vx, vy = spec.leader_velocity
    buf.write(f"leader_velocity {float(vx)!r} {float(vy)!r}\n")
    buf.write(f"interaction_range {float(spec.interaction_range)!r}\n")
    buf.write(f"obstacle_range {float(spec.obstacle_range)!r}\n")
    buf.write("\nshape\n")
    for i, (x, y) in enumerate(spec.shape):
        buf.write(f"{i} {float(x)!r} {float(y)!r}\n")
    buf.write("\nedges\n")
    rows, cols = np.nonzero(spec.adjacency)
    for i, j in zip(rows, cols):
        buf.write(f"{i} {j} {float(spec.adjacency[i, j])!r}\n")
    return buf.getvalue()


def write_network(spec: NetworkSpec, path) -> None:
    """Write a network file: parameters, shape block, edge list."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(network_to_text(spec))


def network_from_text(text: str, origin: str = "<string>") -> NetworkSpec:
    """Parse the network file format from a string."""
    params: dict[str, object] = {}
    shape_rows: dict[int, tuple[float, float]] = {}
    edges: list[tuple[int, int, float]] = []
    section = "params"
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "shape":
            section = "shape"
            continue
        if line == "edges":
            section = "edges"
            continue
        parts = line.split()
        try:
            if section == "params":
                key, *rest = parts
                if key == "n":
                    params["n"] = int(rest[0])
                elif key == "leader":
                    params["leader"] = int(rest[0])
                elif key == "leader_velocity":
                    params["leader_velocity"] = (float(rest[0]), float(rest[1]))
                elif key in _PARAM_KEYS:
                    params[key] = float(rest[0])
                else:
                    raise ValueError(f"unknown parameter {key!r}")
            elif section == "shape":
                shape_rows[int(parts[0])] = (float(parts[1]), float(parts[2]))
            else:
                edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{origin}:{lineno}: cannot parse {raw.rstrip()!r}") from exc

    missing = {"n", "leader", "control_period", "leader_velocity"} - params.keys()
    if missing:
        raise ValueError(f"{origin}: missing parameters {sorted(missing)}")
    n = int(params["n"])  # type: ignore[arg-type]
    if sorted(shape_rows) != list(range(n)):
        raise ValueError(f"{origin}: shape block must cover ids 0..{n - 1} exactly")
    shape = np.array([shape_rows[i] for i in range(n)])
    adjacency = np.zeros((n, n))
    for i, j, a in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"{origin}: edge ({i}, {j}) out of range")
        if adjacency[i, j] != 0:
            raise ValueError(f"{origin}: duplicate edge ({i}, {j})")
        adjacency[i, j] = a
    return NetworkSpec(
        n=n,
        adjacency=adjacency,
        shape=shape,
        leader=int(params["leader"]),  # type: ignore[arg-type]
        leader_velocity=np.array(params["leader_velocity"]),
        control_period=float(params["control_period"]),  # type: ignore[arg-type]
        interaction_range=float(params.get("interaction_range", 5.0)),  # type: ignore[arg-type]
        obstacle_range=float(params.get("obstacle_range", 1.5)),  # type: ignore[arg-type]
    )


def read_network(path) -> NetworkSpec:
    """Read a network file written by :func:`write_network`."""
    with open(path, "r", encoding="utf-8") as fh:
        return network_from_text(fh.read(), origin=str(path))


# ---------------------------------------------------------------------------
# random instances


def random_network(
    n: int,
    seed,
    extra_edge_prob: float = 0.25,
    weight_range: tuple[float, float] = (0.1, 1.0),
    shape_scale: float = 4.0,
    leader_velocity: tuple[float, float] = (0.3, 0.0),
) -> NetworkSpec:
    """Sample a leader-rooted network for property tests.

    Robot 0 is the leader and keeps zero in-edges, so the collective steady
    velocity equals the commanded one exactly. Every other robot listens to
    at least one lower-indexed robot (a spanning tree onto the leader), plus
    optional extra edges. Note that steady-state displacement from a sustained
    single-robot push propagates unattenuated to pure followers, so tests
    that probe excitation responses should pick topologies deliberately
    rather than rely on this sampler.
    """
    rng = np.random.default_rng(seed)
    lo, hi = weight_range
    adjacency = np.zeros((n, n))
    for i in range(1, n):
        parent = int(rng.integers(0, i))
        adjacency[i, parent] = rng.uniform(lo, hi)
        for j in range(n):
            if j != i and adjacency[i, j] == 0 and rng.random() < extra_edge_prob / n:
                adjacency[i, j] = rng.uniform(lo, hi)
    max_degree = adjacency.sum(axis=1).max()
    control_period = 0.9 / max_degree
    shape = rng.uniform(-shape_scale, shape_scale, size=(n, 2))
    return NetworkSpec(
        n=n,
        adjacency=adjacency,
        shape=shape,
        leader=0,
        leader_velocity=np.asarray(leader_velocity, dtype=float),
        control_period=float(control_period),
        interaction_range=5.0,
        obstacle_range=1.5,
    )
