"""Court geometry, tracking containers and half-court normalization."""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FULL_COURT_LENGTH = 94.0
MIN_POSSESSION_SECONDS = 5.0
FRAME_RATE = 25.0


class TrackingError(ValueError):
    """Raised for malformed or out-of-bounds tracking input."""


@dataclass(frozen=True)
class CourtGeometry:
    """Offensive half court measured in feet.

    ``x`` runs from the baseline (0) to half court (``depth_ft``) and ``y``
    across the court (0 to ``width_ft``). Tiles are square cells of side
    ``tile_size_ft``.
    """

    width_ft: float = 50.0
    depth_ft: float = 47.0
    hoop: tuple = (5.25, 25.0)
    tile_size_ft: float = 1.0

    def __post_init__(self):
        hx, hy = self.hoop
        if not (0 < hx < self.depth_ft and 0 < hy < self.width_ft):
            raise ValueError(f"hoop {self.hoop} must lie strictly inside the court")

    @property
    def nx(self) -> int:
        return int(round(self.depth_ft / self.tile_size_ft))

    @property
    def ny(self) -> int:
        return int(round(self.width_ft / self.tile_size_ft))

    @property
    def n_tiles(self) -> int:
        return self.nx * self.ny

    @property
    def hoop_array(self) -> np.ndarray:
        return np.asarray(self.hoop, dtype=float)

    def contains(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return ((xy[..., 0] >= 0) & (xy[..., 0] <= self.depth_ft)
                & (xy[..., 1] >= 0) & (xy[..., 1] <= self.width_ft))

    def tile_index(self, xy) -> np.ndarray:
        """Row-major tile id (``ix * ny + iy``) of each location.

        Cells are closed on their upper edge, so a point sitting on an edge
        shared by two cells goes to the lower-index cell.
        """
        xy = np.asarray(xy, dtype=float)
        if not np.all(np.isfinite(xy)) or not np.all(self.contains(xy)):
            raise TrackingError("location outside the half court")
        s = self.tile_size_ft
        ix = np.clip(np.ceil(xy[..., 0] / s).astype(int) - 1, 0, self.nx - 1)
        iy = np.clip(np.ceil(xy[..., 1] / s).astype(int) - 1, 0, self.ny - 1)
        out = ix * self.ny + iy
        return out if out.ndim else int(out)

    def tile_center(self, tile) -> np.ndarray:
        tile = np.asarray(tile)
        if np.any(tile < 0) or np.any(tile >= self.n_tiles):
            raise TrackingError("tile id out of range")
        ix, iy = np.divmod(tile, self.ny)
        s = self.tile_size_ft
        return np.stack([(ix + 0.5) * s, (iy + 0.5) * s], axis=-1)

    def tile_centers(self) -> np.ndarray:
        """(V, 2) array of all tile centers in tile-id order."""
        return self.tile_center(np.arange(self.n_tiles))


DEFAULT_COURT = CourtGeometry()


def tile_index(location, geometry: CourtGeometry = DEFAULT_COURT):
    return geometry.tile_index(location)


def tile_center(tile, geometry: CourtGeometry = DEFAULT_COURT):
    return geometry.tile_center(tile)


@dataclass(frozen=True)
class ShotEvent:
    shooter: int
    location: tuple
    made: bool
    frame: int
    defender_distance_ft: Optional[float] = None


@dataclass(frozen=True)
class TrackingFrame:
    t: float
    offender_pos: np.ndarray
    defender_pos: np.ndarray
    ball_pos: np.ndarray
    ball_handler: Optional[int] = None


def _frozen(a, shape=None, dtype=float):
    a = np.array(a, dtype=dtype)
    if shape is not None and a.shape[1:] != shape:
        raise TrackingError(f"expected trailing shape {shape}, got {a.shape[1:]}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Possession:
    """A single possession stored as per-frame arrays.

    Attributes
    ----------
    t : ndarray (T,)
        Seconds since possession start, strictly increasing.
    offense, defense : ndarray (T, 5, 2)
        Player positions in feet.
    ball : ndarray (T, 2)
    ball_handler : ndarray (T,)
        Offender slot holding the ball, -1 when nobody does.
    shot : ShotEvent or None
        ``shot.frame`` indexes into the frame arrays.
    """

    id: str
    t: np.ndarray
    offense: np.ndarray
    defense: np.ndarray
    ball: np.ndarray
    ball_handler: np.ndarray
    shot: Optional[ShotEvent] = None
    offense_team: int = 0
    defense_team: int = 1
    offense_ids: tuple = (0, 1, 2, 3, 4)
    defense_ids: tuple = (5, 6, 7, 8, 9)

    def __post_init__(self):
        for name, shape in (("t", ()), ("offense", (5, 2)), ("defense", (5, 2)),
                            ("ball", (2,))):
            object.__setattr__(self, name, _frozen(getattr(self, name), shape))
        object.__setattr__(self, "ball_handler", _frozen(self.ball_handler, (), int))
        n = len(self.t)
        if not (len(self.offense) == len(self.defense) == len(self.ball)
                == len(self.ball_handler) == n):
            raise TrackingError(f"possession {self.id}: inconsistent frame counts")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise TrackingError(f"possession {self.id}: frame times not strictly increasing")
        if self.shot is not None and not 0 <= self.shot.frame < n:
            raise TrackingError(f"possession {self.id}: shot frame out of range")
        object.__setattr__(self, "offense_ids", tuple(int(i) for i in self.offense_ids))
        object.__setattr__(self, "defense_ids", tuple(int(i) for i in self.defense_ids))

    def __len__(self):
        return len(self.t)

    @property
    def n_frames(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        if len(self.t) == 0:
            return 0.0
        dt = np.median(np.diff(self.t)) if len(self.t) > 1 else 1.0 / FRAME_RATE
        return float(self.t[-1] - self.t[0] + dt)

    @property
    def frames(self) -> List[TrackingFrame]:
        return [TrackingFrame(float(self.t[i]), self.offense[i], self.defense[i], self.ball[i],
                              None if self.ball_handler[i] < 0 else int(self.ball_handler[i]))
                for i in range(len(self.t))]

    @classmethod
    def from_frames(cls, id, frames: Sequence[TrackingFrame], **kwargs) -> "Possession":
        return cls(
            id=id,
            t=[f.t for f in frames],
            offense=np.reshape([f.offender_pos for f in frames], (-1, 5, 2)),
            defense=np.reshape([f.defender_pos for f in frames], (-1, 5, 2)),
            ball=np.reshape([f.ball_pos for f in frames], (-1, 2)),
            ball_handler=[-1 if f.ball_handler is None else f.ball_handler for f in frames],
            **kwargs,
        )

    def subset(self, mask) -> "Possession":
        """Keep the frames selected by ``mask``; the shot survives only if its frame does."""
        idx = np.flatnonzero(mask)
        shot = None
        if self.shot is not None and self.shot.frame in set(idx.tolist()):
            new_frame = int(np.searchsorted(idx, self.shot.frame))
            shot = ShotEvent(self.shot.shooter, self.shot.location, self.shot.made,
                             new_frame, self.shot.defender_distance_ft)
        return Possession(self.id, self.t[idx], self.offense[idx], self.defense[idx],
                          self.ball[idx], self.ball_handler[idx], shot, self.offense_team,
                          self.defense_team, self.offense_ids, self.defense_ids)


def _reflect(xy):
    out = np.array(xy, dtype=float)
    out[..., 0] = FULL_COURT_LENGTH - out[..., 0]
    out[..., 1] = DEFAULT_COURT.width_ft - out[..., 1]
    return out


def normalize_half_court(possession: Possession, attacking: Optional[str] = None,
                         geometry: CourtGeometry = DEFAULT_COURT) -> Possession:
    """Rotate a full-court possession so the attacked hoop is the canonical one.

    Parameters
    ----------
    attacking : {"near", "far", None}
        Which hoop the offense attacks. ``None`` infers it from the ball at
        the final frame, where the possession ends.
    """
    width = geometry.width_ft
    for name in ("offense", "defense", "ball"):
        a = getattr(possession, name)
        if (np.any(~np.isfinite(a)) or np.any(a[..., 0] < 0) or np.any(a[..., 0] > FULL_COURT_LENGTH)
                or np.any(a[..., 1] < 0) or np.any(a[..., 1] > width)):
            raise TrackingError(f"possession {possession.id}: {name} position outside "
                                f"[0,{FULL_COURT_LENGTH:g}]x[0,{width:g}]")
    if attacking is None:
        if len(possession) == 0:
            raise TrackingError(f"possession {possession.id}: cannot infer attack direction")
        bx = possession.ball[-1, 0]
        if possession.shot is not None:
            bx = possession.shot.location[0]
        if bx == FULL_COURT_LENGTH / 2:
            raise TrackingError(f"possession {possession.id}: attack direction unknown")
        attacking = "near" if bx < FULL_COURT_LENGTH / 2 else "far"
    if attacking == "near":
        return possession
    if attacking != "far":
        raise TrackingError(f"possession {possession.id}: attack direction unknown")
    shot = possession.shot
    if shot is not None:
        shot = ShotEvent(shot.shooter, tuple(_reflect(shot.location).tolist()), shot.made,
                         shot.frame, shot.defender_distance_ft)
    return Possession(possession.id, possession.t, _reflect(possession.offense),
                      _reflect(possession.defense), _reflect(possession.ball),
                      possession.ball_handler, shot, possession.offense_team,
                      possession.defense_team, possession.offense_ids, possession.defense_ids)


def admit_possession(possession: Possession, geometry: CourtGeometry = DEFAULT_COURT,
                     min_seconds: float = MIN_POSSESSION_SECONDS) -> Optional[Possession]:
    """Trim a normalized possession to the modeled window, or return None.

    Activity after the first shot is dropped, as are frames where any
    player or the ball is outside the offensive half. Possessions shorter
    than ``min_seconds`` afterwards are rejected.
    """
    keep = np.ones(len(possession), dtype=bool)
    if possession.shot is not None:
        keep[possession.shot.frame + 1:] = False
    in_half = (geometry.contains(possession.offense).all(axis=1)
               & geometry.contains(possession.defense).all(axis=1)
               & geometry.contains(possession.ball))
    keep &= in_half
    if possession.shot is not None and not keep[possession.shot.frame]:
        logger.warning("possession %s: shot frame outside the half court, shot dropped",
                       possession.id)
    trimmed = possession.subset(keep)
    if len(trimmed) == 0 or trimmed.duration < min_seconds - 1e-9:
        return None
    return trimmed


# ---------------------------------------------------------------------------
# JSONL tracking format

def _frame_record(p: Possession, i: int) -> dict:
    rec = {
        "possession_id": p.id,
        "t": float(p.t[i]),
        "offense": p.offense[i].tolist(),
        "defense": p.defense[i].tolist(),
        "ball": p.ball[i].tolist(),
        "ball_handler": None if p.ball_handler[i] < 0 else int(p.ball_handler[i]),
        "shot": None,
        "offense_team": p.offense_team,
        "defense_team": p.defense_team,
        "offense_ids": list(p.offense_ids),
        "defense_ids": list(p.defense_ids),
    }
    if p.shot is not None and p.shot.frame == i:
        rec["shot"] = {"shooter": int(p.shot.shooter), "x": float(p.shot.location[0]),
                       "y": float(p.shot.location[1]), "made": bool(p.shot.made)}
    return rec


def iter_jsonl_records(possessions: Iterable[Possession]) -> Iterator[dict]:
    for p in possessions:
        for i in range(len(p)):
            yield _frame_record(p, i)


def write_tracking_jsonl(possessions: Iterable[Possession], path) -> None:
    with open(path, "w") as fh:
        for rec in iter_jsonl_records(possessions):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _possession_from_records(pid, recs) -> Possession:
    recs = sorted(recs, key=lambda r: r["t"])
    kept, shot = [], None
    for r in recs:
        ball = r.get("ball")
        if ball is None or any(v is None or (isinstance(v, float) and math.isnan(v)) for v in ball):
            logger.warning("possession %s: frame at t=%s has no ball position, dropped", pid, r["t"])
            continue
        if r.get("shot") and shot is None:
            s = r["shot"]
            shot = ShotEvent(int(s["shooter"]), (float(s["x"]), float(s["y"])), bool(s["made"]),
                             len(kept))
        kept.append(r)
    first = recs[0]
    return Possession(
        id=str(pid),
        t=[r["t"] for r in kept],
        offense=np.reshape([r["offense"] for r in kept], (-1, 5, 2)),
        defense=np.reshape([r["defense"] for r in kept], (-1, 5, 2)),
        ball=np.reshape([r["ball"] for r in kept], (-1, 2)),
        ball_handler=[-1 if r.get("ball_handler") is None else r["ball_handler"] for r in kept],
        shot=shot,
        offense_team=int(first.get("offense_team", 0)),
        defense_team=int(first.get("defense_team", 1)),
        offense_ids=tuple(first.get("offense_ids", range(5))),
        defense_ids=tuple(first.get("defense_ids", range(5, 10))),
    )


def read_tracking_jsonl(path) -> List[Possession]:
    """Read possessions from a JSONL file, one frame per line, grouped by id."""
    groups, order = {}, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrackingError(f"{path}:{lineno}: {exc}") from None
            pid = rec["possession_id"]
            if pid not in groups:
                groups[pid] = []
                order.append(pid)
            groups[pid].append(rec)
    return [_possession_from_records(pid, groups[pid]) for pid in order]


def is_three_point(xy, geometry: CourtGeometry = DEFAULT_COURT, arc_ft=23.75, corner_ft=22.0,
                   corner_depth_ft=14.0):
    """Whether locations lie beyond the three-point line.

    Within ``corner_depth_ft`` of the baseline the line is straight at
    ``corner_ft`` from the hoop's long axis; elsewhere it is an arc of radius
    ``arc_ft`` around the hoop.
    """
    xy = np.asarray(xy, dtype=float)
    hx, hy = geometry.hoop
    lateral = np.abs(xy[..., 1] - hy)
    radial = np.hypot(xy[..., 0] - hx, xy[..., 1] - hy)
    return np.where(xy[..., 0] <= corner_depth_ft, lateral >= corner_ft, radial >= arc_ft)
