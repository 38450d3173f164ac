"""Graph-network motion model over object crops, and scene synthesis.

Each forecasting window holds n objects plus one agent (the pusher
tip).  Nodes carry an appearance code phi (from a small 3-d conv
encoder over the object's first-frame crop), cumulative pose since the
window start, velocity, the action, and an agent flag.  Edges connect
every ordered pair of nodes and carry the relative displacement between
current positions together with the sender's encoded features, so
absolute positions never enter node inputs and global translations
leave predictions unchanged.

The model predicts per-object pose deltas which accumulate: positions
sum, orientations compose by quaternion product.  No renormalization
happens during accumulation, which keeps a zero-motion unroll the exact
identity on poses; predicted deltas are already unit quaternions.

Scene synthesis warps each first-frame crop by its cumulative rotation
(trilinear, about the crop center) and splats it at the shifted
centroid, differentiable in crops and positions but not rotations.

Windows batch by stacking: graphs become block-diagonal 0/1 matrices,
so one forward pass serves training batches and planner candidates.
"""

from __future__ import annotations

import numpy as np

from voxsim import tensor as T
from voxsim.detector import CROP_SIZE
from voxsim.errors import ConfigError, DataError, ShapeError
from voxsim.geometry import quat_canonical_np, quat_mul_np

PHI_DIM = 32
HIDDEN = 32
NODE_FEATURES = {"ours": PHI_DIM + 14, "xyz": 14}
QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


class GraphBatch:
    """Block-diagonal structure for a batch of fully-connected windows.

    Node order is [objects..., agent] per window, windows concatenated.
    All matrices are constant 0/1 (the displacement matrix also holds
    -1), so graph gather and scatter become plain matmuls.
    """

    def __init__(self, n_objects):
        self.n_objects = [int(n) for n in n_objects]
        if len(self.n_objects) == 0:
            raise ShapeError("graph batch needs at least one window")
        for n in self.n_objects:
            if n < 1:
                raise ShapeError("each window needs at least one object node")
        self.n_windows = len(self.n_objects)
        counts = [n + 1 for n in self.n_objects]
        self.n_nodes = sum(counts)
        self.total_objects = sum(self.n_objects)

        senders = []
        receivers = []
        obj_rows = []
        agent_rows = []
        base = 0
        for b, c in enumerate(counts):
            obj_rows.extend(range(base, base + c - 1))
            agent_rows.append(base + c - 1)
            for r in range(c):
                for s in range(c):
                    if s != r:
                        senders.append(base + s)
                        receivers.append(base + r)
            base += c
        self.senders = np.array(senders, dtype=np.intp)
        self.receivers = np.array(receivers, dtype=np.intp)
        self.obj_rows = np.array(obj_rows, dtype=np.intp)
        self.agent_rows = np.array(agent_rows, dtype=np.intp)
        n_edges = len(senders)

        self.sender_gather = np.zeros((n_edges, self.n_nodes))
        self.sender_gather[np.arange(n_edges), self.senders] = 1.0
        self.disp = np.zeros((n_edges, self.n_nodes))
        self.disp[np.arange(n_edges), self.senders] += 1.0
        self.disp[np.arange(n_edges), self.receivers] -= 1.0

        no = self.total_objects
        self.object_gather = np.zeros((no, self.n_nodes))
        self.object_gather[np.arange(no), self.obj_rows] = 1.0
        self.object_scatter = self.object_gather.T.copy()
        self.agent_scatter = np.zeros((self.n_nodes, self.n_windows))
        self.agent_scatter[self.agent_rows, np.arange(self.n_windows)] = 1.0
        self.agent_flag = self.agent_scatter.sum(axis=1, keepdims=True)
        # window index of each object row, for per-window action lookup
        self.object_window = np.repeat(np.arange(self.n_windows),
                                       self.n_objects)


class WindowBatch:
    """First-frame content of a batch of windows.

    crops [total_objects, C, 16, 16, 16] (None for the xyz variant) and
    masks are immutable across an unroll; p0/r0 are the objects'
    first-frame poses, agent_p0 the pusher tip positions.
    """

    __slots__ = ("graph", "crops", "masks", "p0", "r0", "agent_p0")

    def __init__(self, n_objects, p0, r0, agent_p0, crops=None, masks=None):
        self.graph = n_objects if isinstance(n_objects, GraphBatch) \
            else GraphBatch(n_objects)
        no = self.graph.total_objects
        b = self.graph.n_windows
        self.p0 = np.asarray(p0, dtype=np.float64).reshape(no, 3).copy()
        self.r0 = np.asarray(r0, dtype=np.float64).reshape(no, 4).copy()
        self.agent_p0 = np.asarray(agent_p0, dtype=np.float64).reshape(b, 3).copy()
        if crops is not None:
            cd = crops.data if isinstance(crops, T.Tensor) else np.asarray(crops)
            if cd.ndim != 5 or cd.shape[0] != no or cd.shape[2:] != (CROP_SIZE,) * 3:
                raise ShapeError("crops must be [n_objects, C, 16, 16, 16]")
            self.crops = crops if isinstance(crops, T.Tensor) else T.Tensor(cd)
        else:
            self.crops = None
        if masks is not None:
            self.masks = np.asarray(masks, dtype=np.float64).reshape(
                no, CROP_SIZE, CROP_SIZE, CROP_SIZE).copy()
        else:
            self.masks = None

    @classmethod
    def single(cls, p0, r0, agent_p0, crops=None, masks=None):
        p0 = np.asarray(p0, dtype=np.float64).reshape(-1, 3)
        return cls([len(p0)], p0, r0, np.asarray(agent_p0).reshape(1, 3),
                   crops, masks)


class UnrollState:
    """Cumulative pose state: p_hat starts at zero, r_hat at identity.

    p_hat/r_hat/vel are tensors so gradients flow through time.  The
    agent is tracked by its cumulative displacement (plain data, summed
    actions): keeping it relative means nothing downstream of the state
    depends on absolute coordinates, which preserves exact translation
    invariance across every step of an unroll.  agent_vel is the action
    applied on the previous step (zero at step 0), mirroring the object
    velocity convention.
    """

    __slots__ = ("p_hat", "r_hat", "vel", "agent_cum", "agent_vel",
                 "step", "phi")

    def __init__(self, p_hat, r_hat, vel, agent_cum, agent_vel, step, phi):
        self.p_hat = p_hat
        self.r_hat = r_hat
        self.vel = vel
        self.agent_cum = agent_cum
        self.agent_vel = agent_vel
        self.step = step
        self.phi = phi

    def agent_positions(self, window):
        return window.agent_p0 + self.agent_cum


class ObjectEncoder:
    """Crop [C,16,16,16] -> phi [32]: three strided convs, global
    average pool, two fully connected layers, leaky relu throughout."""

    CONV_WIDTH = 16

    def __init__(self, params, in_channels, prefix, rng=None):
        self.prefix = prefix
        self.params = params
        w = self.CONV_WIDTH
        shapes = {
            "conv0.k": (w, in_channels, 3, 3, 3),
            "conv1.k": (w, w, 3, 3, 3),
            "conv2.k": (w, w, 3, 3, 3),
            "fc0.w": (w, PHI_DIM),
            "fc1.w": (PHI_DIM, PHI_DIM),
        }
        for short, shape in shapes.items():
            name = f"{prefix}.{short}"
            if name not in params:
                if rng is None:
                    raise ConfigError(f"missing parameter {name} and no rng to init")
                params.xavier(name, shape, rng)
        for short in ("fc0.b", "fc1.b"):
            name = f"{prefix}.{short}"
            if name not in params:
                params.zeros(name, (PHI_DIM,))

    def _p(self, short):
        return self.params[f"{self.prefix}.{short}"]

    def __call__(self, crops):
        x = crops if isinstance(crops, T.Tensor) else T.Tensor(crops)
        if x.shape[-3:] != (CROP_SIZE,) * 3:
            raise ShapeError(f"object crops must be {CROP_SIZE} cubed")
        x = T.leaky_relu(T.conv3d(x, self._p("conv0.k"), 2, 1))
        x = T.leaky_relu(T.conv3d(x, self._p("conv1.k"), 2, 1))
        x = T.leaky_relu(T.conv3d(x, self._p("conv2.k"), 2, 1))
        x = T.avg_pool3d_global(x)
        x = T.leaky_relu(T.linear(x, self._p("fc0.w"), self._p("fc0.b")))
        return T.leaky_relu(T.linear(x, self._p("fc1.w"), self._p("fc1.b")))


class MotionModel:
    """Interaction network over window graphs.

    variant "ours" feeds crop encodings into node features; "xyz" omits
    appearance entirely and sees only poses, velocities and actions.
    """

    VARIANTS = ("ours", "xyz")

    def __init__(self, params, variant="ours", grid_channels=8,
                 prefix="dyn", rounds=1, rng=None):
        if variant not in self.VARIANTS:
            raise ConfigError(f"unknown model variant: {variant!r}")
        if rounds < 1:
            raise ConfigError("message passing needs at least one round")
        self.variant = variant
        self.params = params
        self.prefix = prefix
        self.rounds = rounds
        self.node_in = NODE_FEATURES[variant]
        self.encoder = None
        if variant == "ours":
            self.encoder = ObjectEncoder(params, grid_channels,
                                         f"{prefix}.enc", rng)
            if f"{prefix}.agent_phi" not in params:
                if rng is None:
                    raise ConfigError("missing agent embedding and no rng")
                params.xavier(f"{prefix}.agent_phi", (1, PHI_DIM), rng)
        self._init_mlp("node", self.node_in, (HIDDEN,) * 4, rng)
        self._init_mlp("edge", 3 + HIDDEN, (HIDDEN,) * 4, rng)
        if rounds > 1:
            self._init_mlp("update", 2 * HIDDEN, (HIDDEN, HIDDEN), rng)
        self._init_mlp("head", 2 * HIDDEN, (HIDDEN, HIDDEN, 7), rng)
        head_bias = self.params[f"{prefix}.head2.b"]
        if not head_bias.data.any():
            # start the rotation head at the identity quaternion
            head_bias.data[3] = 1.0

    def _init_mlp(self, stem, n_in, widths, rng):
        prev = n_in
        for i, width in enumerate(widths):
            wname = f"{self.prefix}.{stem}{i}.w"
            bname = f"{self.prefix}.{stem}{i}.b"
            if wname not in self.params:
                if rng is None:
                    raise ConfigError(f"missing parameter {wname} and no rng to init")
                self.params.xavier(wname, (prev, width), rng)
            if bname not in self.params:
                self.params.zeros(bname, (width,))
            prev = width

    def param_names(self):
        return [n for n in self.params.names() if n.startswith(self.prefix + ".")]

    def _mlp(self, stem, x, n_layers, final_linear):
        for i in range(n_layers):
            x = T.linear(x, self.params[f"{self.prefix}.{stem}{i}.w"],
                         self.params[f"{self.prefix}.{stem}{i}.b"])
            if i < n_layers - 1 or not final_linear:
                x = T.leaky_relu(x)
        return x

    def encode(self, crops):
        if self.variant != "ours":
            raise ConfigError("the xyz variant has no object encoder")
        return self.encoder(crops)

    def forward_graph(self, window, state, actions):
        """Predict per-object pose deltas for one step.

        actions [n_windows, 3].  Returns (delta_p [total_objects, 3],
        delta_r [total_objects, 4]) with delta_r unit, w >= 0.
        """
        g = window.graph
        actions = np.asarray(actions, dtype=np.float64)
        if actions.size != g.n_windows * 3:
            raise ShapeError(f"actions must be [{g.n_windows}, 3]")
        actions = actions.reshape(g.n_windows, 3)

        pcum = T.add(T.matmul(g.object_scatter, state.p_hat),
                     g.agent_scatter @ state.agent_cum)
        rcum = T.add(T.matmul(g.object_scatter, state.r_hat),
                     g.agent_flag * QUAT_IDENTITY)
        vel = T.add(T.matmul(g.object_scatter, state.vel),
                    g.agent_scatter @ state.agent_vel)
        u = g.agent_scatter @ actions
        parts = [pcum, rcum, vel, u, g.agent_flag]
        if self.variant == "ours":
            if state.phi is None:
                raise ConfigError("state has no phi; build it with init_state")
            agent_phi = T.matmul(np.ones((g.n_windows, 1)),
                                 self.params[f"{self.prefix}.agent_phi"])
            phi = T.add(T.matmul(g.object_scatter, state.phi),
                        T.matmul(g.agent_scatter, agent_phi))
            parts.insert(0, phi)
        x = T.concat(parts, axis=1)

        h = self._mlp("node", x, 4, final_linear=False)
        # relative displacements split into a first-frame part, where a
        # global translation cancels within each edge, and a cumulative
        # part that never sees absolute coordinates at all
        pos0 = g.object_scatter @ window.p0 + g.agent_scatter @ window.agent_p0
        rel = T.add(T.matmul(g.disp, pcum), g.disp @ pos0)
        for rnd in range(self.rounds):
            edge_x = T.concat([rel, T.matmul(g.sender_gather, h)], axis=1)
            msg = self._mlp("edge", edge_x, 4, final_linear=False)
            # content-ordered aggregation: permuting node labels permutes
            # the incoming edges but cannot change a receiver's summed
            # message
            agg = T.segment_sum_sorted(msg, g.receivers, g.n_nodes)
            if rnd < self.rounds - 1:
                h = self._mlp("update", T.concat([h, agg], axis=1), 2,
                              final_linear=False)
        raw = self._mlp("head", T.concat([h, agg], axis=1), 3, final_linear=True)

        obj_raw = T.matmul(g.object_gather, raw)
        delta_p = T.narrow(obj_raw, 1, 0, 3)
        delta_r = T.quat_canonical(T.narrow(obj_raw, 1, 3, 4))
        return delta_p, delta_r


def init_state(model, window):
    """Fresh unroll state: zero cumulative pose, zero velocity."""
    no = window.graph.total_objects
    phi = None
    if model is not None and model.variant == "ours":
        if window.crops is None:
            raise ConfigError("the ours variant needs object crops")
        phi = model.encode(window.crops)
    b = window.graph.n_windows
    return UnrollState(
        p_hat=T.Tensor(np.zeros((no, 3))),
        r_hat=T.Tensor(np.tile(QUAT_IDENTITY, (no, 1))),
        vel=T.Tensor(np.zeros((no, 3))),
        agent_cum=np.zeros((b, 3)),
        agent_vel=np.zeros((b, 3)),
        step=0,
        phi=phi,
    )


def accumulate(state, delta_p, delta_r, actions, window):
    """Apply one step of predicted deltas and the agent's action.

    Positions sum and orientations compose by quaternion product with
    no renormalization, so exact zero-motion deltas leave the pose
    bitwise unchanged.  The agent moves by its action exactly.
    """
    g = window.graph
    no = g.total_objects
    if not isinstance(delta_p, T.Tensor):
        delta_p = T.Tensor(np.asarray(delta_p, dtype=np.float64))
    if not isinstance(delta_r, T.Tensor):
        delta_r = T.Tensor(np.asarray(delta_r, dtype=np.float64))
    if delta_p.shape != (no, 3) or delta_r.shape != (no, 4):
        raise ShapeError(f"predictions must cover all {no} objects")
    actions = np.asarray(actions, dtype=np.float64).reshape(g.n_windows, 3)
    return UnrollState(
        p_hat=T.add(state.p_hat, delta_p),
        r_hat=T.quat_mul(delta_r, state.r_hat),
        vel=delta_p,
        agent_cum=state.agent_cum + actions,
        agent_vel=actions,
        step=state.step + 1,
        phi=state.phi,
    )


def unroll(model, window, actions, steps=None, predict=None, state=None):
    """Roll the model forward through a window's actions.

    actions [T, n_windows, 3] (or [T, 3] for a single window).  steps
    defaults to the action count and may not exceed it.  predict
    overrides the model call, taking (window, state, actions_t) and
    returning (delta_p, delta_r); the default is forward_graph.  state
    overrides the fresh initial state, letting callers reuse an
    already-encoded phi.  Returns (states, preds): states has steps+1
    entries starting at the initial state, preds has one
    (delta_p, delta_r) pair per step.
    """
    g = window.graph
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 2:
        actions = actions[:, None, :]
    if actions.ndim != 3 or actions.shape[1:] != (g.n_windows, 3):
        raise ShapeError("actions must be [T, n_windows, 3]")
    if steps is None:
        steps = actions.shape[0]
    if steps < 1:
        raise DataError("an unroll needs at least one step")
    if steps > actions.shape[0]:
        raise DataError(f"{steps} steps need {steps} actions, "
                        f"got {actions.shape[0]}")
    if predict is None:
        if model is None:
            raise ConfigError("unroll needs a model or an explicit predict")
        predict = model.forward_graph
    if state is None:
        state = init_state(model, window)
    states = [state]
    preds = []
    for t in range(steps):
        delta_p, delta_r = predict(window, state, actions[t])
        state = accumulate(state, delta_p, delta_r, actions[t], window)
        states.append(state)
        preds.append((delta_p, delta_r))
    return states, preds


def zero_motion(window, state, actions):
    """Prediction stub: no translation, identity rotation."""
    no = window.graph.total_objects
    return (T.Tensor(np.zeros((no, 3))),
            T.Tensor(np.tile(QUAT_IDENTITY, (no, 1))))


def rotate_grid(grid, quat):
    """Inverse-warp trilinear rotation of [C,S,S,S] about its center.

    Out-of-bounds samples read zero.  Differentiable in the grid; the
    rotation is a constant.  The quaternion is normalized here, so any
    positive multiple of the identity leaves lattice data untouched.
    """
    gd = grid.data if isinstance(grid, T.Tensor) else np.asarray(grid)
    if gd.ndim != 4:
        raise ShapeError("rotate_grid expects [C,S,S,S]")
    q = np.asarray(quat, dtype=np.float64).reshape(4)
    norm = np.sqrt(np.sum(q * q))
    if norm < 1e-12:
        raise ShapeError("cannot rotate by a near-zero quaternion")
    q = q / norm
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    dims = gd.shape[1:]
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    idx = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims],
                               indexing="ij"), axis=-1).reshape(-1, 3)
    # output cell at offset o samples the input at R^-1 o = o @ R
    coords = (idx - center) @ rot + center
    samples = T.grid_sample3d(grid, coords)
    cube = T.reshape(samples, dims + (gd.shape[0],))
    return T.transpose(cube, (3, 0, 1, 2))


def synthesize_scene(window, state, spec, background=None, stats=None):
    """Splat each object's warped first-frame crop at its shifted centroid.

    Differentiable in the crops and in state.p_hat; rotations enter as
    constants.  background, if given, is added as constant data.  Objects
    whose crop extends past the grid are clipped; pass a dict as stats to
    get their indices under "clipped".
    """
    if window.crops is None:
        raise ConfigError("scene synthesis needs object crops")
    g = window.graph
    no = g.total_objects
    c = window.crops.shape[1]
    r_hat = state.r_hat.data if isinstance(state.r_hat, T.Tensor) else state.r_hat
    scene = None
    offsets = _crop_offsets()
    clipped = []
    half = (CROP_SIZE - 1) / 2.0
    dims = np.asarray(spec.dims, dtype=np.float64)
    for o in range(no):
        crop = T.narrow(window.crops, 0, o, 1)
        crop = T.reshape(crop, window.crops.shape[1:])
        if window.masks is not None:
            crop = T.mul(crop, window.masks[o][None])
        rotated = rotate_grid(crop, r_hat[o])
        values = T.transpose(rotated, (1, 2, 3, 0))
        values = T.reshape(values, (CROP_SIZE ** 3, c))
        p_hat_o = T.reshape(T.narrow(state.p_hat, 0, o, 1), (3,))
        center = T.add(p_hat_o, window.p0[o])
        center_vox = T.sub(T.mul(T.sub(center, spec.origin), 1.0 / spec.voxel), 0.5)
        if np.any(center_vox.data - half < 0.0) or \
                np.any(center_vox.data + half > dims - 1.0):
            clipped.append(o)
        coords = T.add(center_vox, offsets)
        splat = T.grid_splat3d(values, coords, spec.dims)
        scene = splat if scene is None else T.add(scene, splat)
    if background is not None:
        bg = background.data if isinstance(background, T.Tensor) else background
        scene = T.add(scene, np.asarray(bg))
    if stats is not None:
        stats["clipped"] = clipped
    return scene


def _crop_offsets():
    line = np.arange(CROP_SIZE, dtype=np.float64) - (CROP_SIZE - 1) / 2.0
    ii, jj, kk = np.meshgrid(line, line, line, indexing="ij")
    return np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)


def edit_object(window, index, translation=(0.0, 0.0, 0.0), rotation=None,
                scale=1.0):
    """Counterfactual edit: move/rotate an object's start pose and
    rescale its crop and mask about the crop center.

    Returns a new WindowBatch; other objects' crops are shared bitwise.
    Scale > 1 makes the object larger (content magnified).
    """
    g = window.graph
    if not 0 <= index < g.total_objects:
        raise DataError(f"no object with index {index}")
    if scale <= 0:
        raise DataError("scale must be positive")
    p0 = window.p0.copy()
    r0 = window.r0.copy()
    p0[index] = p0[index] + np.asarray(translation, dtype=np.float64)
    crops = None if window.crops is None else window.crops.data.copy()
    masks = None if window.masks is None else window.masks.copy()
    rot = np.asarray(rotation, dtype=np.float64) if rotation is not None else None
    if rot is not None:
        r0[index] = quat_canonical_np(quat_mul_np(rot, r0[index]))
    needs_resample = scale != 1.0 or (
        rot is not None and not np.array_equal(rot, QUAT_IDENTITY))
    if needs_resample and crops is not None:
        crops[index] = _resample_crop(window.crops.data[index], rot, scale)
    if needs_resample and masks is not None:
        masks[index] = _resample_crop(masks[index][None], rot, scale)[0]
    return WindowBatch(g, p0, r0, window.agent_p0,
                       None if crops is None else T.Tensor(crops), masks)


def _resample_crop(crop, rot_quat, scale):
    """Magnify by `scale` and rotate about the crop center, constants
    only (edits are data preparation, not part of the training graph)."""
    center = (CROP_SIZE - 1) / 2.0
    idx = np.stack(np.meshgrid(*[np.arange(CROP_SIZE, dtype=np.float64)] * 3,
                               indexing="ij"), axis=-1).reshape(-1, 3)
    offs = (idx - center) / scale
    if rot_quat is not None:
        q = np.asarray(rot_quat, dtype=np.float64)
        q = q / np.sqrt(np.sum(q * q))
        w, x, y, z = q
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        offs = offs @ rot
    coords = offs + center
    out = T.grid_sample3d(np.ascontiguousarray(crop), coords)
    c = crop.shape[0]
    return out.data.reshape((CROP_SIZE,) * 3 + (c,)).transpose(3, 0, 1, 2)
