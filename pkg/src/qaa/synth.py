"""Synthetic multi-domain place world standing in for backbone patch features.

Latent space layout (canonical coordinates, before a domain transform):

* dims ``[0, signal_dim)`` carry the place identity. Each place owns
  ``num_parts`` unit part latents here (its landmarks), spread over the patch
  grid by a per-place layout; a viewpoint angle rotates them with a
  world-level generator and shifts the layout sideways.
* the remaining dims are split into nuisance blocks of ``signal_dim`` width.
  Distractor latents live in block 0; a domain's orthogonal transform swaps
  block 0 with the domain's own block and slightly rotates the signal block.

A patch row is ``A_d (a_i R(theta) z_p[part_i] + sigma * g * s_i * (c @ D) + noise_i) + b_d``
where ``part_i``, ``a_i`` and ``s_i = 1.2 - a_i`` are the per-place layout,
``c`` are per-image distractor weights drawn from the caller's generator and
``noise_i`` is isotropic Gaussian with total norm about ``sigma``. ``sigma``
scales every stochastic term, so ``sigma == 0`` gives deterministic renders.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .errors import CapacityError, ConfigError

MIN_SEPARATION_M = 50.0
# Below this noise scale a nearest-centroid classifier on mean patch features
# separates places with > 90% accuracy. Above it the clutter term swamps the
# mean, and telling places apart needs attention over individual patches.
SEPARABLE_NOISE = 0.15


@dataclass(frozen=True)
class DomainSpec:
    name: str = "domain"
    viewpoint_spread: float = 0.3
    noise: float = 1.0
    clutter: float = 3.0
    density: float = 20.0  # places per km^2
    appearance_angle: float = 0.3
    bias_scale: float = 0.05

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigError(f"domain {self.name!r}: noise must be >= 0")
        if self.density <= 0:
            raise ConfigError(f"domain {self.name!r}: density must be > 0")
        if self.viewpoint_spread < 0:
            raise ConfigError(f"domain {self.name!r}: viewpoint_spread must be >= 0")


@dataclass
class DomainProfile:
    spec: DomainSpec
    transform: np.ndarray
    bias: np.ndarray
    nuisance_block: int

    @property
    def name(self) -> str:
        return self.spec.name


DEFAULT_DOMAINS = (
    DomainSpec("multiview_sparse", viewpoint_spread=0.5, noise=1.0, clutter=2.0, density=10.0),
    DomainSpec("frontview_dense", viewpoint_spread=0.1, noise=1.0, clutter=2.0, density=40.0),
    DomainSpec("multiview_grouped", viewpoint_spread=0.35, noise=1.0, clutter=2.0, density=20.0),
)


@dataclass(frozen=True)
class WorldSpec:
    num_places: int = 480
    c_o: int = 64
    num_patches: int = 49
    signal_dim: int = 16
    num_distractors: int = 8
    num_parts: int = 4
    min_separation: float = MIN_SEPARATION_M
    seed: int = 0
    domains: tuple = DEFAULT_DOMAINS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domains"] = [asdict(s) for s in self.domains]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown world field(s): {', '.join(sorted(unknown))}")
        if "domains" in d:
            d["domains"] = tuple(DomainSpec(**s) for s in d["domains"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class SyntheticWorld:
    spec: WorldSpec
    places: np.ndarray  # (num_places, num_parts, c_o), canonical coordinates
    coords: np.ndarray  # (num_places, 2), metres
    place_domain: np.ndarray  # owning domain of each place
    layouts: np.ndarray  # (num_places, num_patches) place weight per patch
    part_of_patch: np.ndarray  # (num_places, num_patches) part index shown by each patch
    distractors: np.ndarray  # (num_distractors, c_o)
    view_generator: np.ndarray  # (signal_dim, signal_dim) skew-symmetric
    domains: list = field(default_factory=list)
    frame_index: np.ndarray | None = None

    @property
    def seed(self) -> int:
        return self.spec.seed

    @property
    def c_o(self) -> int:
        return self.spec.c_o

    @property
    def num_patches(self) -> int:
        return self.spec.num_patches

    def places_of(self, domain_id: int) -> np.ndarray:
        return np.flatnonzero(self.place_domain == domain_id)


@dataclass
class PlaceObservation:
    patches: np.ndarray
    place_id: int
    domain_id: int
    position: tuple
    frame_idx: int | None = None
    obs_id: str = ""


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _random_rotation(dim, angle, rng):
    g = rng.normal(size=(dim, dim))
    g = g - g.T
    g /= np.linalg.norm(g, 2)
    return expm(angle * g)


def _domain_profile(spec: DomainSpec, index, world: WorldSpec, rng) -> DomainProfile:
    c_o, sd = world.c_o, world.signal_dim
    n_blocks = (c_o - sd) // sd
    block = index % n_blocks if n_blocks else 0
    perm = np.arange(c_o)
    if n_blocks and block:
        a = np.arange(sd, 2 * sd)
        b = np.arange(sd + block * sd, sd + (block + 1) * sd)
        perm[a], perm[b] = b, a
    swap = np.eye(c_o)[perm]
    appear = np.eye(c_o)
    appear[:sd, :sd] = _random_rotation(sd, spec.appearance_angle, rng)
    transform = swap @ appear
    bias = spec.bias_scale * _unit_rows(rng.normal(size=(1, c_o)))[0]
    return DomainProfile(spec, transform, bias, block)


def _place_coords(n, density, min_sep, rng, offset):
    side = 1000.0 * math.sqrt(n / density)
    pts = []
    attempts = 0
    limit = 2000 * max(n, 1)
    while len(pts) < n:
        attempts += 1
        if attempts > limit:
            raise CapacityError(
                f"cannot place {n} places {min_sep} m apart at density {density}/km^2"
            )
        p = rng.uniform(0.0, side, size=2)
        if pts and np.min(np.linalg.norm(np.asarray(pts) - p, axis=1)) < min_sep:
            continue
        pts.append(p)
    return np.asarray(pts).reshape(n, 2) + np.asarray([offset, 0.0]), side


def generate_world(spec: WorldSpec | None = None, **overrides) -> SyntheticWorld:
    """Build a world from ``spec`` (fields may be overridden by keyword)."""
    spec = spec or WorldSpec()
    if overrides:
        spec = replace(spec, **overrides)
    if spec.num_places < 2:
        raise ConfigError("num_places must be >= 2")
    if not spec.domains:
        raise ConfigError("at least one domain is required")
    if spec.signal_dim * 2 > spec.c_o:
        raise ConfigError(f"c_o={spec.c_o} must be at least twice signal_dim={spec.signal_dim}")
    rng = np.random.default_rng(spec.seed)
    c_o, sd = spec.c_o, spec.signal_dim

    if spec.num_parts < 1:
        raise ConfigError("num_parts must be >= 1")
    places = np.zeros((spec.num_places, spec.num_parts, c_o))
    places[..., :sd] = _unit_rows(rng.normal(size=(spec.num_places, spec.num_parts, sd)))
    distractors = np.zeros((spec.num_distractors, c_o))
    distractors[:, sd:2 * sd] = _unit_rows(rng.normal(size=(spec.num_distractors, sd)))
    layouts = rng.uniform(0.2, 1.0, size=(spec.num_places, spec.num_patches))
    part_of_patch = rng.integers(0, spec.num_parts, size=(spec.num_places, spec.num_patches))
    view_gen = rng.normal(size=(sd, sd))
    view_gen = view_gen - view_gen.T
    view_gen /= np.linalg.norm(view_gen, 2)
    domains = [_domain_profile(s, i, spec, rng) for i, s in enumerate(spec.domains)]

    n_dom = len(spec.domains)
    place_domain = np.arange(spec.num_places) % n_dom
    coords = np.zeros((spec.num_places, 2))
    offset = 0.0
    for d, s in enumerate(spec.domains):
        ids = np.flatnonzero(place_domain == d)
        pts, side = _place_coords(len(ids), s.density, spec.min_separation, rng, offset)
        coords[ids] = pts
        offset += side + 10 * spec.min_separation
    return SyntheticWorld(spec, places, coords, place_domain, layouts, part_of_patch, distractors,
                          view_gen, domains)


def generate_sequence(num_frames: int = 200, c_o: int = 64, seed: int = 0, correlation: float = 0.95,
                      domains: tuple = DEFAULT_DOMAINS[:2], num_patches: int = 49,
                      signal_dim: int = 16) -> SyntheticWorld:
    """Route-style world: consecutive frames have correlated part latents.

    Frame ``t`` sits at ``(t * 50 m, 0)``; ``frame_index`` equals the place id.
    """
    spec = WorldSpec(num_places=num_frames, c_o=c_o, num_patches=num_patches, signal_dim=signal_dim,
                     seed=seed, domains=tuple(domains))
    world = generate_world(spec)
    rng = np.random.default_rng([seed, 1])
    shape = world.places.shape[1:2] + (signal_dim,)
    lat = np.zeros((num_frames,) + shape)
    lat[0] = rng.normal(size=shape)
    for t in range(1, num_frames):
        lat[t] = correlation * lat[t - 1] + math.sqrt(1 - correlation ** 2) * rng.normal(size=shape)
    world.places[..., :signal_dim] = _unit_rows(lat)
    world.part_of_patch[:] = world.part_of_patch[0]
    world.layouts[:] = world.layouts[0]
    world.coords = np.stack([np.arange(num_frames) * spec.min_separation, np.zeros(num_frames)], axis=1)
    world.place_domain = np.zeros(num_frames, dtype=int)
    world.frame_index = np.arange(num_frames)
    return world


def viewpoint_rotation(world: SyntheticWorld, angle: float) -> np.ndarray:
    return expm(angle * world.view_generator)


def render_observation(world: SyntheticWorld, place_id: int, domain_id: int, viewpoint_angle: float,
                       rng: np.random.Generator) -> PlaceObservation:
    if not 0 <= place_id < len(world.places):
        raise IndexError(f"place id {place_id} out of range [0, {len(world.places)})")
    if not 0 <= domain_id < len(world.domains):
        raise IndexError(f"domain id {domain_id} out of range [0, {len(world.domains)})")
    spec = world.spec
    sd = spec.signal_dim
    dom = world.domains[domain_id]
    sigma = dom.spec.noise

    z = world.places[place_id].copy()
    z[:, :sd] = z[:, :sd] @ viewpoint_rotation(world, viewpoint_angle).T
    side = int(round(math.sqrt(spec.num_patches)))
    layout = world.layouts[place_id]
    parts = world.part_of_patch[place_id]
    shift = int(round(viewpoint_angle / 0.15))
    if side * side == spec.num_patches and shift:
        layout = np.roll(layout.reshape(side, side), shift, axis=1).reshape(-1)
        parts = np.roll(parts.reshape(side, side), shift, axis=1).reshape(-1)
    canon = layout[:, None] * z[parts]
    if sigma > 0:
        coeff = rng.normal(size=len(world.distractors)) / math.sqrt(len(world.distractors))
        clutter = (1.2 - layout)[:, None] * (coeff @ world.distractors)[None, :]
        canon = canon + sigma * dom.spec.clutter * clutter
        canon = canon + rng.normal(scale=sigma / math.sqrt(spec.c_o), size=canon.shape)
    # unit-norm latents become tokens with O(1) entries, like layer-normalised backbone output
    patches = (canon @ dom.transform.T + dom.bias) * math.sqrt(spec.c_o)
    frame = None if world.frame_index is None else int(world.frame_index[place_id])
    return PlaceObservation(patches, int(place_id), int(domain_id),
                            tuple(float(c) for c in world.coords[place_id]), frame)


def observation_viewpoint(world: SyntheticWorld, place_id: int, domain_id: int, index: int) -> float:
    """Fixed viewpoint of the ``index``-th training image of a place in a domain."""
    u = np.random.default_rng([world.seed, int(place_id), int(domain_id), int(index), 7]).uniform(-1, 1)
    return float(u * world.domains[domain_id].spec.viewpoint_spread)


@dataclass
class DomainDataset:
    """Training images of some places of one world as seen in one domain."""

    world: SyntheticWorld
    domain_id: int
    place_ids: np.ndarray
    images_per_place: int = 8

    @property
    def name(self) -> str:
        return self.world.domains[self.domain_id].name

    def render(self, place_id: int, index: int, rng) -> PlaceObservation:
        theta = observation_viewpoint(self.world, place_id, self.domain_id, index)
        return render_observation(self.world, place_id, self.domain_id, theta, rng)


def split_places(world: SyntheticWorld, domain_id: int, val_fraction: float = 0.4):
    """Deterministic train/validation split of the places owned by a domain."""
    ids = world.places_of(domain_id)
    order = np.random.default_rng([world.seed, domain_id, 3]).permutation(ids)
    n_val = max(1, int(round(val_fraction * len(ids))))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class EvalSplit:
    domain_id: int
    database: list
    queries: list

    @staticmethod
    def stack(obs) -> np.ndarray:
        return np.stack([o.patches for o in obs])


def make_eval_split(world: SyntheticWorld, domain_id: int, place_ids, queries_per_place: int = 2,
                    seed: int = 0) -> EvalSplit:
    """Database: one frontal render per place. Queries: renders at random viewpoints."""
    rng = np.random.default_rng([world.seed, domain_id, seed, 11])
    spread = world.domains[domain_id].spec.viewpoint_spread
    db, qs = [], []
    for p in place_ids:
        o = render_observation(world, int(p), domain_id, 0.0, rng)
        o.obs_id = f"d{domain_id}_p{int(p)}_db"
        db.append(o)
        for j in range(queries_per_place):
            theta = float(rng.uniform(-spread, spread))
            o = render_observation(world, int(p), domain_id, theta, rng)
            o.obs_id = f"d{domain_id}_p{int(p)}_q{j}"
            qs.append(o)
    return EvalSplit(domain_id, db, qs)


def make_sequence_split(world: SyntheticWorld, db_domain: int = 0, query_domain: int = 1,
                        seed: int = 0) -> EvalSplit:
    """Route protocol: every frame rendered frontally in one domain (database) and
    at a random viewpoint in another (queries)."""
    if world.frame_index is None:
        raise ConfigError("sequence split needs a world with frame indices")
    rng = np.random.default_rng([world.seed, db_domain, query_domain, seed, 13])
    spread = world.domains[query_domain].spec.viewpoint_spread
    db, qs = [], []
    for p in range(len(world.places)):
        o = render_observation(world, p, db_domain, 0.0, rng)
        o.obs_id = f"f{p}_db"
        db.append(o)
        o = render_observation(world, p, query_domain, float(rng.uniform(-spread, spread)), rng)
        o.obs_id = f"f{p}_q"
        qs.append(o)
    return EvalSplit(query_domain, db, qs)
