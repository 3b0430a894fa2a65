"""Log-hazard networks with interchangeable time-conditioning heads.

The backbone maps covariates to an embedding h.  Time enters through one
of three heads:

* ``concat``   -- time is appended to the covariates at the input, so every
                  time point costs a full backbone pass.
* ``film``     -- a generator driven by a learned time embedding produces
                  per-channel scale/shift applied to h.
* ``lora``     -- the penultimate affine map gets a time-gated low-rank
                  update W + U diag(s(t)) V; the base products W h and V h
                  depend only on covariates and are computed once per
                  subject, so extra time points cost only the small
                  modulation branch.

Both a recorded (differentiable) forward and a plain numpy evaluation
forward are provided; they perform the same operations in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ShapeError, UsageError
from .quadrature import QuadratureRule

CONDITIONING_KINDS = ("concat", "film", "lora")
ACTIVATIONS = ("tanh", "softplus", "gelu", "sigmoid", "relu")


@dataclass
class ModelConfig:
    input_dim: int
    hidden: tuple = (32, 32)
    activation: str = "gelu"
    conditioning: str = "lora"
    rank: int = 8
    time_embed_dim: int = 16
    modulation_hidden: int = 32
    batchnorm: bool = False
    dropout: float = 0.0
    time_scale: float = 1.0

    def __post_init__(self):
        if not (self.time_scale > 0 and math.isfinite(self.time_scale)):
            raise UsageError(f"time_scale must be positive, got {self.time_scale}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_dim < 1:
            raise UsageError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise UsageError(f"hidden sizes must be positive, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if self.conditioning not in CONDITIONING_KINDS:
            raise UsageError(f"unknown conditioning {self.conditioning!r}")
        if self.conditioning == "lora" and self.rank >= self.hidden[-1]:
            raise UsageError(
                f"low-rank head needs rank < embedding width, got rank={self.rank} "
                f"for width {self.hidden[-1]}")
        if self.time_embed_dim < 2:
            raise UsageError("time_embed_dim must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must be in [0, 1), got {self.dropout}")

    def as_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "conditioning": self.conditioning,
            "rank": self.rank,
            "time_embed_dim": self.time_embed_dim,
            "modulation_hidden": self.modulation_hidden,
            "batchnorm": self.batchnorm,
            "dropout": self.dropout,
            "time_scale": self.time_scale,
        }


def _glorot(rng, d_out, d_in):
    limit = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_out, d_in))


class HazardModel:
    """All learnable state of a log-hazard network f(x, t)."""

    def __init__(self, config: ModelConfig, rng=None):
        self.config = config
        self.params: dict[str, ad.Tensor] = {}
        self.bn_states: list[ad.BatchNormState] = []
        if rng is None:
            rng = np.random.default_rng(0)
        self._init_params(rng)

    # --- construction --------------------------------------------------

    def _init_params(self, rng):
        cfg = self.config
        d_in = cfg.input_dim + (1 if cfg.conditioning == "concat" else 0)
        for i, width in enumerate(cfg.hidden):
            self.params[f"backbone.{i}.W"] = ad.parameter(_glorot(rng, width, d_in))
            self.params[f"backbone.{i}.b"] = ad.parameter(np.zeros(width))
            if cfg.batchnorm:
                self.params[f"backbone.{i}.bn.gamma"] = ad.parameter(np.ones(width))
                self.params[f"backbone.{i}.bn.beta"] = ad.parameter(np.zeros(width))
                self.bn_states.append(ad.BatchNormState(width))
            d_in = width
        d_h = cfg.hidden[-1]

        if cfg.conditioning != "concat":
            # frequencies initialized relative to the working time scale so the
            # embedding neither saturates nor aliases on the observed range
            m = cfg.time_embed_dim
            self.params["phi.w0"] = ad.parameter(np.full((1, 1), 1.0 / cfg.time_scale))
            self.params["phi.b0"] = ad.parameter(np.zeros(1))
            freqs = np.exp(rng.uniform(math.log(0.1), math.log(10.0),
                                       size=(m - 1, 1))) / cfg.time_scale
            self.params["phi.wf"] = ad.parameter(freqs)
            self.params["phi.bf"] = ad.parameter(rng.uniform(0.0, 2.0 * math.pi, size=m - 1))

        if cfg.conditioning == "film":
            mh = cfg.modulation_hidden
            self.params["film.h.W"] = ad.parameter(_glorot(rng, mh, cfg.time_embed_dim))
            self.params["film.h.b"] = ad.parameter(np.zeros(mh))
            self.params["film.gamma.W"] = ad.parameter(np.zeros((d_h, mh)))
            self.params["film.gamma.b"] = ad.parameter(np.ones(d_h))
            self.params["film.beta.W"] = ad.parameter(np.zeros((d_h, mh)))
            self.params["film.beta.b"] = ad.parameter(np.zeros(d_h))
        elif cfg.conditioning == "lora":
            mh = cfg.modulation_hidden
            r = cfg.rank
            self.params["lora.W"] = ad.parameter(_glorot(rng, d_h, d_h))
            self.params["lora.b"] = ad.parameter(np.zeros(d_h))
            self.params["lora.U"] = ad.parameter(np.zeros((d_h, r)))
            self.params["lora.V"] = ad.parameter(
                rng.normal(0.0, 1.0 / math.sqrt(d_h), size=(r, d_h)))
            self.params["mod.h.W"] = ad.parameter(_glorot(rng, mh, cfg.time_embed_dim))
            self.params["mod.h.b"] = ad.parameter(np.zeros(mh))
            self.params["mod.out.W"] = ad.parameter(
                rng.normal(0.0, 1.0 / math.sqrt(mh), size=(r, mh)))
            self.params["mod.out.b"] = ad.parameter(np.zeros(r))

        self.params["head.W"] = ad.parameter(_glorot(rng, 1, d_h))
        self.params["head.b"] = ad.parameter(np.zeros(1))

    def trainable(self) -> dict[str, ad.Tensor]:
        return self.params

    # --- recorded (differentiable) forward ------------------------------

    def _backbone_recorded(self, inp, training, rng):
        cfg = self.config
        h = inp
        for i in range(len(cfg.hidden)):
            h = ad.affine(self.params[f"backbone.{i}.W"],
                          self.params[f"backbone.{i}.b"], h)
            if cfg.batchnorm:
                h = ad.batch_norm(h, self.params[f"backbone.{i}.bn.gamma"],
                                  self.params[f"backbone.{i}.bn.beta"],
                                  self.bn_states[i], training)
            h = ad.elementwise(cfg.activation, h)
            if cfg.dropout > 0.0:
                h = ad.dropout(h, cfg.dropout, rng, training)
        return h

    def _time_embed_recorded(self, t_col):
        lin = ad.affine(self.params["phi.w0"], self.params["phi.b0"], t_col)
        osc = ad.elementwise(
            "sin", ad.affine(self.params["phi.wf"], self.params["phi.bf"], t_col))
        return ad.concat_cols([lin, osc])

    def forward_times_recorded(self, x, times, training=False, rng=None):
        """Log-hazard tensor of shape (batch, n_times) for per-subject times.

        ``x`` is (batch, d) and ``times`` (batch, n_times); entry (i, j) is
        f(x_i, times[i, j]).
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        times = np.asarray(times, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ShapeError(
                f"covariates have shape {x.shape}, expected (batch, {cfg.input_dim})")
        if times.ndim != 2 or times.shape[0] != x.shape[0]:
            raise ShapeError(
                f"times have shape {times.shape}, expected ({x.shape[0]}, n)")
        b, r = times.shape
        t_flat = times.reshape(-1, 1)

        if cfg.conditioning == "concat":
            inp = ad.tensor(np.hstack([np.repeat(x, r, axis=0),
                                       t_flat / cfg.time_scale]))
            h = self._backbone_recorded(inp, training, rng)
            f = ad.affine(self.params["head.W"], self.params["head.b"], h)
            return ad.reshape(f, (b, r))

        h = self._backbone_recorded(ad.tensor(x), training, rng)
        h_rep = ad.tile_rows(h, r)
        emb = self._time_embed_recorded(ad.tensor(t_flat))

        if cfg.conditioning == "film":
            g_hidden = ad.elementwise(
                cfg.activation,
                ad.affine(self.params["film.h.W"], self.params["film.h.b"], emb))
            gamma = ad.affine(self.params["film.gamma.W"],
                              self.params["film.gamma.b"], g_hidden)
            beta = ad.affine(self.params["film.beta.W"],
                             self.params["film.beta.b"], g_hidden)
            modulated = ad.add(ad.mul(gamma, h_rep), beta)
            f = ad.affine(self.params["head.W"], self.params["head.b"], modulated)
            return ad.reshape(f, (b, r))

        # lora: base products cached once per subject, reused at every time
        wh = ad.affine(self.params["lora.W"], self.params["lora.b"], h)
        vh = ad.linear(self.params["lora.V"], h)
        wh_rep = ad.tile_rows(wh, r)
        vh_rep = ad.tile_rows(vh, r)
        s_hidden = ad.elementwise(
            cfg.activation,
            ad.affine(self.params["mod.h.W"], self.params["mod.h.b"], emb))
        s = ad.affine(self.params["mod.out.W"], self.params["mod.out.b"], s_hidden)
        z = ad.add(wh_rep, ad.linear(self.params["lora.U"], ad.mul(s, vh_rep)))
        f = ad.affine(self.params["head.W"], self.params["head.b"], z)
        return ad.reshape(f, (b, r))

    # --- plain numpy evaluation forward ---------------------------------

    def _eval_backbone(self, x):
        cfg = self.config
        h = x
        for i in range(len(cfg.hidden)):
            h = h @ self.params[f"backbone.{i}.W"].values.T \
                + self.params[f"backbone.{i}.b"].values
            if cfg.batchnorm:
                st = self.bn_states[i]
                h = (h - st.running_mean) / np.sqrt(st.running_var + st.eps)
                h = self.params[f"backbone.{i}.bn.gamma"].values * h \
                    + self.params[f"backbone.{i}.bn.beta"].values
            h = ad.activation_fn(cfg.activation)(h)
        return h

    def _eval_time_embed(self, t_flat):
        lin = t_flat @ self.params["phi.w0"].values.T + self.params["phi.b0"].values
        osc = np.sin(t_flat @ self.params["phi.wf"].values.T
                     + self.params["phi.bf"].values)
        return np.concatenate([lin, osc], axis=1)

    def _eval_head_at_times(self, h, x, times):
        """Evaluation-mode log-hazards; h is the cached backbone output
        (ignored under concat conditioning)."""
        cfg = self.config
        b, r = times.shape
        act = ad.activation_fn(cfg.activation)
        t_flat = times.reshape(-1, 1)

        if cfg.conditioning == "concat":
            inp = np.hstack([np.repeat(x, r, axis=0), t_flat / cfg.time_scale])
            hh = self._eval_backbone(inp)
            f = hh @ self.params["head.W"].values.T + self.params["head.b"].values
            return f.reshape(b, r)

        h_rep = np.repeat(h, r, axis=0)
        emb = self._eval_time_embed(t_flat)

        if cfg.conditioning == "film":
            g_hidden = act(emb @ self.params["film.h.W"].values.T
                           + self.params["film.h.b"].values)
            gamma = g_hidden @ self.params["film.gamma.W"].values.T \
                + self.params["film.gamma.b"].values
            beta = g_hidden @ self.params["film.beta.W"].values.T \
                + self.params["film.beta.b"].values
            modulated = gamma * h_rep + beta
            f = modulated @ self.params["head.W"].values.T \
                + self.params["head.b"].values
            return f.reshape(b, r)

        wh = h @ self.params["lora.W"].values.T + self.params["lora.b"].values
        vh = h @ self.params["lora.V"].values.T
        wh_rep = np.repeat(wh, r, axis=0)
        vh_rep = np.repeat(vh, r, axis=0)
        s_hidden = act(emb @ self.params["mod.h.W"].values.T
                       + self.params["mod.h.b"].values)
        s = s_hidden @ self.params["mod.out.W"].values.T \
            + self.params["mod.out.b"].values
        z = wh_rep + (s * vh_rep) @ self.params["lora.U"].values.T
        f = z @ self.params["head.W"].values.T + self.params["head.b"].values
        return f.reshape(b, r)

    def _eval_shared_times(self, h, x, times_1d):
        """Evaluation-mode log-hazards when every subject shares one time
        vector: (n, T).  The time branch runs once per time point and the
        per-subject combination collapses to a single small matmul, which
        is what makes dense grid evaluation cheap for the cached heads.
        """
        cfg = self.config
        times_1d = np.asarray(times_1d, dtype=np.float64)
        n = x.shape[0] if h is None else h.shape[0]
        if cfg.conditioning == "concat":
            times = np.broadcast_to(times_1d, (n, len(times_1d))).copy()
            return self._eval_head_at_times(None, x, times)
        act = ad.activation_fn(cfg.activation)
        emb = self._eval_time_embed(times_1d[:, None])
        w_head = self.params["head.W"].values[0]
        b_head = self.params["head.b"].values[0]
        if cfg.conditioning == "film":
            g_hidden = act(emb @ self.params["film.h.W"].values.T
                           + self.params["film.h.b"].values)
            gamma = g_hidden @ self.params["film.gamma.W"].values.T \
                + self.params["film.gamma.b"].values
            beta = g_hidden @ self.params["film.beta.W"].values.T \
                + self.params["film.beta.b"].values
            base = beta @ w_head + b_head
            return (h * w_head) @ gamma.T + base[None, :]
        wh = h @ self.params["lora.W"].values.T + self.params["lora.b"].values
        vh = h @ self.params["lora.V"].values.T
        s_hidden = act(emb @ self.params["mod.h.W"].values.T
                       + self.params["mod.h.b"].values)
        s = s_hidden @ self.params["mod.out.W"].values.T \
            + self.params["mod.out.b"].values
        base = wh @ w_head + b_head
        q = w_head @ self.params["lora.U"].values
        return base[:, None] + (vh * q) @ s.T

    def log_hazard_matrix(self, x, times):
        """Evaluation-mode f(x_i, times[i, j]) as an array of shape times.shape."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        times = np.asarray(times, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ShapeError(
                f"covariates have shape {x.shape}, expected (batch, {cfg.input_dim})")
        if times.ndim != 2 or times.shape[0] != x.shape[0]:
            raise ShapeError(
                f"times have shape {times.shape}, expected ({x.shape[0]}, n)")
        h = None if cfg.conditioning == "concat" else self._eval_backbone(x)
        return self._eval_head_at_times(h, x, times)

    # --- public scalar / curve API --------------------------------------

    def log_hazard(self, x, t: float) -> float:
        """f(x, t) for one subject, deterministic in evaluation mode."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        if not math.isfinite(t) or t < 0:
            raise ContractError(f"time must be finite and nonnegative, got {t}")
        return float(self.log_hazard_matrix(x, np.array([[t]]))[0, 0])

    def log_hazard_at_nodes(self, x, t: float, rule: QuadratureRule) -> np.ndarray:
        """f(x, t * tau_k) for every quadrature node, using the cached path."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        if not math.isfinite(t) or t < 0:
            raise ContractError(f"time must be finite and nonnegative, got {t}")
        times = (t * rule.unit_nodes)[None, :]
        return self.log_hazard_matrix(x, times)[0]

    def cumulative_hazard_value(self, x, t: float, rule: QuadratureRule) -> float:
        if t == 0:
            return 0.0
        lam = np.exp(self.log_hazard_at_nodes(x, t, rule))
        return float(t / 2.0 * (lam @ rule.weights))

    def survival(self, x, t: float, rule: QuadratureRule) -> float:
        """S(t | x) = exp(-Lambda(t | x)); exactly 1 at t = 0."""
        return float(math.exp(-self.cumulative_hazard_value(x, t, rule)))

    def curves(self, x, grid, rule: QuadratureRule, chunk: int | None = None):
        """Hazard, cumulative hazard and survival over a shared time grid.

        Returns three arrays of shape (n_subjects, len(grid)).  Grid points
        are processed in chunks to bound peak memory.
        """
        x = np.asarray(x, dtype=np.float64)
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 1 or len(grid) == 0:
            raise ContractError("grid must be a nonempty 1-d array")
        if np.any(np.diff(grid) < 0) or grid[0] < 0:
            raise ContractError("grid must be ascending and nonnegative")
        n, g = x.shape[0], len(grid)
        k = rule.order
        h = None if self.config.conditioning == "concat" else self._eval_backbone(x)
        if chunk is None:
            budget = 1_500_000 if self.config.conditioning == "concat" else 30_000_000
            chunk = max(1, budget // max(n * k, 1))

        lam = np.exp(self._eval_shared_times(h, x, grid))
        cumhaz = np.empty((n, g))
        for start in range(0, g, chunk):
            block = grid[start:start + chunk]
            node_times = np.outer(block, rule.unit_nodes).reshape(-1)
            f = self._eval_shared_times(h, x, node_times)
            lam_nodes = np.exp(f).reshape(n, len(block), k)
            cumhaz[:, start:start + chunk] = (block / 2.0) * (lam_nodes @ rule.weights)
        surv = np.exp(-cumhaz)
        return lam, cumhaz, surv

    def hazard_curve(self, x, grid, rule: QuadratureRule):
        """Per-time (hazard, cumulative hazard, survival) for one subject."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        lam, cumhaz, surv = self.curves(x, grid, rule)
        return lam[0], cumhaz[0], surv[0]

    # --- serialization ---------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.values for name, p in self.params.items()}
        for i, st in enumerate(self.bn_states):
            arrays[f"backbone.{i}.bn.running_mean"] = st.running_mean
            arrays[f"backbone.{i}.bn.running_var"] = st.running_var
        return arrays

    def load_state_arrays(self, arrays: dict) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ShapeError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.values.shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {arr.shape}, expected {p.values.shape}")
            p.values = arr.copy()
        for i, st in enumerate(self.bn_states):
            st.running_mean = np.asarray(arrays[f"backbone.{i}.bn.running_mean"],
                                         dtype=np.float64).copy()
            st.running_var = np.asarray(arrays[f"backbone.{i}.bn.running_var"],
                                        dtype=np.float64).copy()

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    @classmethod
    def from_architecture(cls, arch: dict, arrays: dict | None = None) -> "HazardModel":
        cfg = ModelConfig(
            input_dim=int(arch["input_dim"]),
            hidden=tuple(arch["hidden"]),
            activation=arch["activation"],
            conditioning=arch["conditioning"],
            rank=int(arch.get("rank", 8)),
            time_embed_dim=int(arch.get("time_embed_dim", 16)),
            modulation_hidden=int(arch.get("modulation_hidden", 32)),
            batchnorm=bool(arch.get("batchnorm", False)),
            dropout=float(arch.get("dropout", 0.0)),
        )
        model = cls(cfg, np.random.default_rng(0))
        if arrays is not None:
            model.load_state_arrays(arrays)
        return model


@dataclass
class FittedModel:
    """A trained model bundled with its quadrature rule and input scaler.

    Exposes ``curves_matrix`` on raw (unstandardized) covariates, the
    common surface shared with analytic ground-truth objects.
    """

    model: HazardModel
    rule: QuadratureRule
    scaler: object = None

    def _standardize(self, x_raw):
        x = np.asarray(x_raw, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        return self.scaler.transform(x) if self.scaler is not None else x

    def curves_matrix(self, x_raw, grid):
        return self.model.curves(self._standardize(x_raw), grid, self.rule)

    def survival_matrix(self, x_raw, grid):
        return self.curves_matrix(x_raw, grid)[2]
