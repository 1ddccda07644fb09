"""Per-neighborhood material estimation against a reference trajectory.

Particles are split once into neighborhoods (farthest-point centers, nearest
center assignment). Each neighborhood owns elastic logits (3), plastic logits
(4), an unconstrained log Young's modulus and a Poisson logit. The forward
simulation uses the argmax experts; gradients reach the logits through a
softmax surrogate (straight-through). Training follows a staged schedule: the
horizon is cut into stages of ``M`` frames, each stage is re-simulated from
its checkpoint several times before moving on, and the whole pass repeats.
"""

import math
from dataclasses import dataclass, field, replace

import torch

from . import tensor_math as tm
from .constitutive import ElasticModel, MaterialField, MaterialSpec, PhysicalParams, PlasticModel
from .errors import MPMError, ShapeMismatch, TooFewParticles, ValidationError
from .mpm import Trajectory, rollout

LOG_E_CLAMP = 300.0
NU_LOGIT_CLAMP = 30.0


# -- partition -------------------------------------------------------------------

def fps_partition(positions, n_centers, start=0):
    """Greedy farthest-point sampling; returns ``n_centers`` particle indices."""
    x = tm.as_tensor(positions).detach().reshape(-1, 3)
    n = x.shape[0]
    if n_centers < 1 or n_centers > n:
        raise TooFewParticles(f"cannot pick {n_centers} centers from {n} particles")
    chosen = [start]
    dist = ((x - x[start]) ** 2).sum(-1)
    for _ in range(n_centers - 1):
        nxt = int(torch.argmax(dist))
        chosen.append(nxt)
        dist = torch.minimum(dist, ((x - x[nxt]) ** 2).sum(-1))
    return torch.tensor(chosen, dtype=torch.long)


@dataclass(frozen=True)
class Partition:
    centers: torch.Tensor     # (K,) particle indices of the centers
    assignment: torch.Tensor  # (N,) neighborhood of each particle
    k: int = 32

    @property
    def n_neighborhoods(self):
        return self.centers.shape[0]

    def members(self, j):
        return (self.assignment == j).nonzero().squeeze(-1)

    def sizes(self):
        return torch.bincount(self.assignment, minlength=self.n_neighborhoods)


def knn_assign(positions, centers, k=32, chunk=4096):
    """Assign every particle to its nearest center (lowest center index on ties)."""
    x = tm.as_tensor(positions).detach().reshape(-1, 3)
    c = x[centers]
    out = []
    for s in range(0, x.shape[0], chunk):
        d = ((x[s:s + chunk, None, :] - c[None]) ** 2).sum(-1)
        out.append(torch.argmin(d, dim=1))
    assignment = torch.cat(out) if out else torch.zeros(0, dtype=torch.long)
    return Partition(centers.clone(), assignment, k)


def build_partition(positions, k=32):
    n = tm.as_tensor(positions).reshape(-1, 3).shape[0]
    return knn_assign(positions, fps_partition(positions, max(1, math.ceil(n / k))), k)


# -- logits ----------------------------------------------------------------------

def hardmax(z):
    return torch.nn.functional.one_hot(torch.argmax(z, -1), z.shape[-1]).to(z.dtype)


def selection_weights(z, temperature=1.0, anchor=None):
    """Straight-through weights: one-hot argmax forward, softmax gradient backward.

    ``anchor`` fixes the point where the one-hot is taken; by default it is
    ``z`` itself (detached), which gives the usual estimator. Passing a fixed
    anchor turns the same expression into a smooth function of ``z`` whose
    derivative at ``z == anchor`` equals the straight-through gradient.
    """
    anchor = z.detach() if anchor is None else anchor
    soft = torch.softmax(z / temperature, -1)
    return hardmax(anchor) + (soft - torch.softmax(anchor / temperature, -1))


@dataclass
class MaterialLogits:
    elastic: torch.Tensor    # (K, 3)
    plastic: torch.Tensor    # (K, 4)
    log_E: torch.Tensor      # (K,)
    nu_logit: torch.Tensor   # (K,)
    friction_angle: torch.Tensor = None
    yield_stress: torch.Tensor = None

    NAMES = ("elastic", "plastic", "log_E", "nu_logit")

    @classmethod
    def init(cls, n, params=PhysicalParams(), scale=0.0, seed=0, start=None, margin=0.0):
        """Start from ``params`` with logits drawn from ``N(0, scale^2)`` (zeros when ``scale == 0``).

        ``start`` is an optional starting :class:`MaterialSpec`; its elastic and
        plastic logits are raised by ``margin`` so that the starting guess wins
        the argmax robustly instead of through an exact tie.
        """
        gen = torch.Generator().manual_seed(seed)
        rnd = lambda *shape: scale * torch.randn(*shape, generator=gen, dtype=tm.DTYPE)
        elastic, plastic = rnd(n, len(ElasticModel)), rnd(n, len(PlasticModel))
        if start is not None:
            elastic[:, int(start.elastic)] += margin
            plastic[:, int(start.plastic)] += margin
            params = start.params
        nu = 2.0 * params.nu
        return cls(
            elastic=elastic, plastic=plastic,
            log_E=torch.full((n,), math.log(params.E), dtype=tm.DTYPE),
            nu_logit=torch.full((n,), math.log(nu / (1.0 - nu)) if nu > 0 else -NU_LOGIT_CLAMP, dtype=tm.DTYPE),
            friction_angle=torch.full((n,), float(params.friction_angle), dtype=tm.DTYPE),
            yield_stress=torch.full((n,), float(params.yield_stress), dtype=tm.DTYPE),
        ).requires_grad_()

    def __len__(self):
        return self.log_E.shape[0]

    def tensors(self):
        return [getattr(self, n) for n in self.NAMES]

    def requires_grad_(self, flag=True):
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def detached(self):
        return replace(self, **{n: getattr(self, n).detach().clone() for n in self.NAMES})

    @property
    def E(self):
        return torch.exp(torch.clamp(self.log_E, -LOG_E_CLAMP, LOG_E_CLAMP))

    @property
    def nu(self):
        return 0.5 * torch.sigmoid(torch.clamp(self.nu_logit, -NU_LOGIT_CLAMP, NU_LOGIT_CLAMP))

    def categories(self):
        return torch.argmax(self.elastic.detach(), -1), torch.argmax(self.plastic.detach(), -1)

    def specs(self):
        el, pl = self.categories()
        E, nu = self.E.detach(), self.nu.detach()
        return [
            MaterialSpec(ElasticModel(int(el[j])), PlasticModel(int(pl[j])),
                         PhysicalParams(float(E[j]), float(nu[j]), float(self.friction_angle[j]),
                                        float(self.yield_stress[j])))
            for j in range(len(self))
        ]


def select_material(logits, neighborhood):
    """The hard (argmax) material of one neighborhood."""
    return logits.specs()[neighborhood]


def material_field(logits, partition, temperature=1.0, anchor=None, base=None, members=None):
    """Per-particle material field driven by ``logits``.

    With ``base`` and ``members`` only those particles are overwritten; the
    rest keep their fixed materials.
    """
    a = partition.assignment
    anchor = anchor or (None, None)
    we = selection_weights(logits.elastic, temperature, anchor[0])[a]
    wp = selection_weights(logits.plastic, temperature, anchor[1])[a]
    learned = MaterialField(we, wp, logits.E[a], logits.nu[a], logits.friction_angle[a], logits.yield_stress[a])
    if base is None:
        return learned
    idx = (members,)
    return MaterialField(*(
        getattr(base, f).index_put(idx, getattr(learned, f))
        for f in ("elastic_weights", "plastic_weights", "E", "nu", "friction_angle", "yield_stress")
    ))


# -- loss ------------------------------------------------------------------------

def trajectory_loss(simulated, reference):
    """Mean squared particle displacement error over frames and particles (m^2)."""
    a = simulated.x if isinstance(simulated, Trajectory) else simulated
    b = reference.x if isinstance(reference, Trajectory) else reference
    b = tm.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"trajectory shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.numel() == 0:
        return torch.zeros((), dtype=tm.DTYPE)
    return ((a - b) ** 2).sum(-1).mean()


# -- problem ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    stages: int = 10
    frames_per_stage: int = 15
    internal: int = 30
    outer: int = 5
    sample_every: int = 10
    lr: float = 5e-5
    param_lr: float = None    # learning rate of log E and the Poisson logit (defaults to ``lr``)
    temperature: float = 1.0
    neighborhood: int = 32
    betas: tuple = (0.9, 0.999)
    logit_init_scale: float = 0.0
    init_margin: float = 0.0  # head start of the starting material's categories
    keep_best: bool = False   # return the stage-end snapshot with the lowest full-horizon loss
    seed: int = 0

    def __post_init__(self):
        for name in ("stages", "frames_per_stage", "internal", "outer", "sample_every", "neighborhood"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        if not self.lr > 0 or not self.temperature > 0:
            raise ValidationError("lr and temperature must be positive")
        if self.param_lr is not None and not self.param_lr > 0:
            raise ValidationError("param_lr must be positive")

    @property
    def horizon_frames(self):
        return self.stages * self.frames_per_stage


@dataclass
class Problem:
    """A built simulation plus the set of particles whose material is unknown."""

    sim: object
    members: torch.Tensor
    partition: Partition
    temperature: float = 1.0

    @classmethod
    def from_simulation(cls, sim, members=None, k=32, temperature=1.0):
        n = len(sim.state)
        members = torch.arange(n) if members is None else torch.as_tensor(members, dtype=torch.long)
        partition = build_partition(sim.state.x[members], k)
        return cls(sim, members, partition, temperature)

    def field(self, logits, anchor=None):
        return material_field(logits, self.partition, self.temperature, anchor, self.sim.materials, self.members)

    def run(self, logits, state, n_frames, sample_every, anchor=None):
        """Simulate ``n_frames`` sampled frames from ``state``; returns (trajectory, end state)."""
        s = self.sim
        return rollout(state, self.field(logits, anchor), s.grid, s.params, s.bcs,
                       n_frames * sample_every, sample_every, keep_F=False)

    def particle_categories(self, logits):
        el, pl = logits.categories()
        a = self.partition.assignment
        return el[a], pl[a]


def window_loss(problem, logits, state, reference, first_frame, n_frames, sample_every, anchor=None):
    """Loss of frames ``first_frame+1 .. first_frame+n_frames`` simulated from ``state``."""
    ref = reference.x if isinstance(reference, Trajectory) else reference
    if first_frame + n_frames > ref.shape[0] - 1:
        raise ShapeMismatch(f"reference has {ref.shape[0]} frames, window needs {first_frame + n_frames + 1}")
    traj, end = problem.run(logits, state, n_frames, sample_every, anchor)
    return trajectory_loss(traj.x[1:], ref[first_frame + 1:first_frame + n_frames + 1]), end


def estimate_gradients(problem, logits, reference, first_frame=0, n_frames=None, sample_every=10, state=None):
    """Loss and its gradient w.r.t. every logit-table field by reverse-mode differentiation."""
    ref = reference.x if isinstance(reference, Trajectory) else reference
    n_frames = ref.shape[0] - 1 - first_frame if n_frames is None else n_frames
    state = problem.sim.state if state is None else state
    leaves = logits.detached().requires_grad_()
    with torch.enable_grad():
        loss, _ = window_loss(problem, leaves, state, ref, first_frame, n_frames, sample_every)
        grads = torch.autograd.grad(loss, leaves.tensors(), allow_unused=True)
    out = {n: torch.zeros_like(t) if g is None else g for n, t, g in zip(leaves.NAMES, leaves.tensors(), grads)}
    return loss.detach(), out


def finite_difference_gradients(problem, logits, reference, first_frame=0, n_frames=None, sample_every=10,
                                h=1e-4, state=None, names=MaterialLogits.NAMES):
    """Central differences in the unconstrained space.

    Logit entries are differentiated through the anchored surrogate (see
    :func:`selection_weights`), the smooth function whose derivative the
    straight-through estimator reports.
    """
    ref = reference.x if isinstance(reference, Trajectory) else reference
    n_frames = ref.shape[0] - 1 - first_frame if n_frames is None else n_frames
    state = problem.sim.state if state is None else state
    base = logits.detached()
    anchor = (base.elastic.clone(), base.plastic.clone())
    out = {}
    with torch.no_grad():
        for name in names:
            t = getattr(base, name)
            g = torch.zeros_like(t)
            for i in range(t.numel()):
                vals = []
                for sign in (1.0, -1.0):
                    probe = base.detached()
                    getattr(probe, name).view(-1)[i] += sign * h
                    vals.append(window_loss(problem, probe, state, ref, first_frame, n_frames,
                                            sample_every, anchor)[0])
                g.view(-1)[i] = (vals[0] - vals[1]) / (2 * h)
            out[name] = g
    return out


def evaluate(problem, logits, reference, sample_every=10, n_frames=None):
    """Full-horizon loss of the hard materials selected by ``logits``."""
    ref = reference.x if isinstance(reference, Trajectory) else reference
    n_frames = ref.shape[0] - 1 if n_frames is None else n_frames
    with torch.no_grad():
        return float(window_loss(problem, logits.detached(), problem.sim.state, ref, 0, n_frames, sample_every)[0])


@dataclass
class TrainResult:
    logits: MaterialLogits                    # returned estimate
    log: list = field(default_factory=list)   # (outer, stage, internal, loss)
    last: MaterialLogits = None               # logits after the final optimizer step
    best_loss: float = None                   # full-horizon loss of ``logits`` when snapshots are kept

    @property
    def losses(self):
        return [r[3] for r in self.log]


def train(problem, reference, cfg, logits=None, start=MaterialSpec(), callback=None):
    """Staged training.

    For every outer pass the simulation restarts from the initial state. Each
    stage saves its starting state, then ``cfg.internal`` times restores it,
    simulates ``frames_per_stage`` frames, compares them with the matching
    reference frames and takes one Adam step. The next stage starts from the
    state reached by the last of those runs. ``callback(outer, stage, internal,
    state)`` sees the restored state before every run.

    With ``cfg.keep_best`` the hard materials are scored on the whole horizon
    before training and after every stage, and the best snapshot is returned.
    """
    ref = reference.x if isinstance(reference, Trajectory) else tm.as_tensor(reference)
    if ref.shape[0] < cfg.horizon_frames + 1:
        raise ValidationError(f"reference has {ref.shape[0]} frames; {cfg.stages} stages x "
                              f"{cfg.frames_per_stage} frames need {cfg.horizon_frames + 1}")
    if ref.shape[1] != len(problem.sim.state):
        raise ShapeMismatch(f"reference has {ref.shape[1]} particles, scene has {len(problem.sim.state)}")
    if logits is None:
        logits = MaterialLogits.init(problem.partition.n_neighborhoods, start.params, cfg.logit_init_scale,
                                     cfg.seed, start, cfg.init_margin)
    logits = logits.detached().requires_grad_()
    param_lr = cfg.lr if cfg.param_lr is None else cfg.param_lr
    opt = torch.optim.Adam([{"params": [logits.elastic, logits.plastic]},
                            {"params": [logits.log_E, logits.nu_logit], "lr": param_lr}],
                           lr=cfg.lr, betas=cfg.betas)
    result = TrainResult(logits)
    M, m = cfg.frames_per_stage, cfg.sample_every
    horizon = ref[:cfg.horizon_frames + 1]
    if cfg.keep_best:
        result.best_loss = evaluate(problem, logits, horizon, m)
        result.logits = logits.detached()
    for outer in range(cfg.outer):
        state = problem.sim.state.detach()
        for stage in range(cfg.stages):
            checkpoint = state.clone()
            for it in range(cfg.internal):
                begin = checkpoint.clone()
                if callback is not None:
                    callback(outer, stage, it, begin)
                opt.zero_grad()
                try:
                    with torch.enable_grad():
                        loss, end = window_loss(problem, logits, begin, ref, stage * M, M, m)
                        loss.backward()
                except MPMError as exc:
                    raise type(exc)(f"{exc} [outer {outer}, stage {stage}, internal {it}]") from exc
                opt.step()
                result.log.append((outer, stage, it, float(loss.detach())))
                state = end.detach()
            if cfg.keep_best:
                try:
                    score = evaluate(problem, logits, horizon, m)
                except MPMError:
                    score = math.inf
                if score < result.best_loss:
                    result.best_loss, result.logits = score, logits.detached()
    result.last = logits.detached()
    if not cfg.keep_best:
        result.logits = result.last
    return result


def category_accuracy(problem, logits, truth_elastic, truth_plastic):
    """Fraction of neighborhoods whose (elastic, plastic) pair matches the majority truth label."""
    el, pl = logits.categories()
    a = problem.partition.assignment
    truth_el = torch.as_tensor(truth_elastic)[problem.members]
    truth_pl = torch.as_tensor(truth_plastic)[problem.members]
    hits = 0
    for j in range(problem.partition.n_neighborhoods):
        idx = a == j
        pair = truth_el[idx] * len(PlasticModel) + truth_pl[idx]
        major = int(torch.mode(pair).values)
        hits += int(el[j]) * len(PlasticModel) + int(pl[j]) == major
    return hits / problem.partition.n_neighborhoods


def write_materials(path, logits, partition):
    """One line per neighborhood: index, elastic, plastic, E, nu, friction angle, yield stress, size."""
    sizes = partition.sizes()
    with open(path, "w") as fh:
        fh.write("# neighborhood elastic plastic E nu friction_angle yield_stress particles\n")
        for j, spec in enumerate(logits.specs()):
            p = spec.params
            fh.write(f"{j} {spec.elastic.name.lower()} {spec.plastic.name.lower()} {p.E!r} {p.nu!r} "
                     f"{p.friction_angle!r} {p.yield_stress!r} {int(sizes[j])}\n")


def read_materials(path):
    specs = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            _, el, pl, E, nu, fa, ys, _ = line.split()
            specs.append(MaterialSpec(el, pl, PhysicalParams(float(E), float(nu), float(fa), float(ys))))
    return specs


def write_loss_log(path, log):
    with open(path, "w") as fh:
        fh.write("outer,stage,internal,loss\n")
        for o, s, i, loss in log:
            fh.write(f"{o},{s},{i},{loss!r}\n")

