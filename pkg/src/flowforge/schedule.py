"""Learning-rate schedules and dataset curricula.

The three canonical schedule shapes:

* ``s_short`` — 600k iterations at 1e-4, held for 300k, then halved every
  100k.
* ``s_long``  — 1.2M iterations at 1e-4, held for the first half, then
  halved every 200k.
* ``s_fine``  — 500k iterations starting at 1e-5, held for 200k, then
  halved every 100k.

All counts scale by a global factor so desk-scale runs keep the breakpoint
ratios. Curricula order datasets into stages and can mix several datasets
inside one batch with exact per-dataset counts.
"""

from dataclasses import dataclass

from .errors import BadPlan, BadScale, ConfigError


def _round(x):
    return int(x + 0.5)


@dataclass(frozen=True)
class LrSchedule:
    segments: tuple      # ((start_iter, lr), ...) ascending starts, first = 0
    total_iters: int

    def __post_init__(self):
        if not self.segments or self.segments[0][0] != 0:
            raise BadScale("first segment must start at iteration 0")
        starts = [s for s, _ in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise BadScale("segment starts must be strictly ascending")
        if any(lr <= 0 for _, lr in self.segments):
            raise BadScale("learning rates must be positive")
        if starts[-1] >= self.total_iters:
            raise BadScale("segment starts must precede total_iters")

    def lr_at(self, iteration):
        lr = self.segments[0][1]
        for start, value in self.segments:
            if iteration >= start:
                lr = value
            else:
                break
        return lr


def _staircase(total, lr0, plateau, halve_every):
    total = max(1, total)
    plateau = max(1, plateau)
    halve_every = max(1, halve_every)
    segments = [(0, lr0)]
    start = plateau
    lr = lr0
    while start < total:
        lr = lr / 2.0
        segments.append((start, lr))
        start += halve_every
    return LrSchedule(tuple(segments), total)


def _check_scale(scale):
    if not 0.0 < scale <= 1.0:
        raise BadScale(f"scale must be in (0, 1], got {scale}")


def s_short(scale=1.0):
    """1e-4 for the first half of 600k, then halved every 100k."""
    _check_scale(scale)
    return _staircase(_round(600_000 * scale), 1e-4,
                      _round(300_000 * scale), _round(100_000 * scale))


def s_long(scale=1.0):
    """1e-4 for the first half of 1.2M, then halved every 200k."""
    _check_scale(scale)
    return _staircase(_round(1_200_000 * scale), 1e-4,
                      _round(600_000 * scale), _round(200_000 * scale))


def s_fine(scale=1.0):
    """Fine-tuning: 1e-5 over 500k, held 200k, halved every 100k."""
    _check_scale(scale)
    return _staircase(_round(500_000 * scale), 1e-5,
                      _round(200_000 * scale), _round(100_000 * scale))


SCHEDULES = {"s_short": s_short, "s_long": s_long, "s_fine": s_fine}


def parse_schedule(text):
    """Parse 'name:scale' (e.g. 's_short:0.005') into an LrSchedule."""
    name, _, scale_text = text.partition(":")
    if name not in SCHEDULES:
        raise ConfigError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}")
    scale = float(scale_text) if scale_text else 1.0
    return SCHEDULES[name](scale)


@dataclass(frozen=True)
class CurriculumSpec:
    """Ordered training stages; each stage is (dataset_id, LrSchedule) with
    an optional batch mixture {dataset_id: samples_per_batch}."""
    stages: tuple        # ((dataset_id, LrSchedule), ...)
    mixtures: tuple      # per-stage dict or None
    batch_size: int = 8

    def __post_init__(self):
        if len(self.stages) != len(self.mixtures):
            raise ConfigError("stages and mixtures must align")
        for mix in self.mixtures:
            if mix is not None and sum(mix.values()) != self.batch_size:
                raise ConfigError(
                    f"mixture {mix} does not sum to batch size {self.batch_size}")

    def dataset_ids(self):
        ids = []
        for (ds, _), mix in zip(self.stages, self.mixtures):
            ids.extend(mix.keys() if mix else [ds])
        return sorted(set(ids))


PLANS = ("simple_only", "complex_only", "mixed", "simple_then_complex", "ft_sd")


def curriculum(stage_plan, scale=1.0, batch_size=8):
    """Build the staged curriculum for one of the named plans.

    simple_then_complex trains on the easy set with s_long, then fine-tunes
    on the hard set with s_fine; mixed uses a 50/50 batch mixture; ft_sd is
    the small-displacement fine-tuning recipe (2 complex + 6 sdhom per
    batch of 8, schedule s_fine).
    """
    if stage_plan == "simple_only":
        return CurriculumSpec((("simple", s_long(scale)),), (None,), batch_size)
    if stage_plan == "complex_only":
        return CurriculumSpec((("complex", s_long(scale)),), (None,), batch_size)
    if stage_plan == "mixed":
        if batch_size % 2:
            raise ConfigError("mixed plan needs an even batch size")
        mix = {"simple": batch_size // 2, "complex": batch_size // 2}
        return CurriculumSpec((("mixed", s_long(scale)),), (mix,), batch_size)
    if stage_plan == "simple_then_complex":
        return CurriculumSpec(
            (("simple", s_long(scale)), ("complex", s_fine(scale))),
            (None, None), batch_size)
    if stage_plan == "ft_sd":
        if batch_size % 4:
            raise ConfigError("ft_sd plan needs a batch size divisible by 4")
        mix = {"complex": batch_size // 4 * 1, "sdhom": batch_size // 4 * 3}
        return CurriculumSpec((("ft_sd", s_fine(scale)),), (mix,), batch_size)
    raise BadPlan(f"unknown plan {stage_plan!r}; choose from {PLANS}")
