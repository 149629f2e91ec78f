"""
Geometry Module
Robust Levenberg-Marquardt bundle adjustment (motion-only, local, global),
linear triangulation and absolute trajectory error
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq

from modules.camera import CameraPose, PinholeCamera
from modules.errors import ConfigError, RejectedInputError, UnderdeterminedError

logger = logging.getLogger(__name__)

CHI2_95_2DOF = 5.991


@dataclass
class Observation:
    keyframe_id: int
    point_id: int
    pixel: np.ndarray
    level: int = 0

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(self.pixel)):
            raise RejectedInputError(f"observation of point {self.point_id} has a non-finite pixel")
        if self.level < 0:
            raise RejectedInputError("pyramid level must be non-negative")


@dataclass
class BAProblem:
    poses: Dict[int, CameraPose]
    points: Dict[int, np.ndarray]
    observations: List[Observation]
    camera: PinholeCamera
    fixed_pose_ids: Set[int] = field(default_factory=set)

    def validate(self) -> None:
        for obs in self.observations:
            if obs.keyframe_id not in self.poses:
                raise RejectedInputError(f"observation references unknown keyframe {obs.keyframe_id}")
            if obs.point_id not in self.points:
                raise RejectedInputError(f"observation references unknown point {obs.point_id}")

    def copy(self) -> "BAProblem":
        return BAProblem({k: p.copy() for k, p in self.poses.items()},
                         {k: np.array(v, dtype=np.float64) for k, v in self.points.items()},
                         list(self.observations), self.camera, set(self.fixed_pose_ids))


@dataclass
class RobustConfig:
    huber_delta: Optional[float] = math.sqrt(CHI2_95_2DOF)
    sigma_base: float = 1.0
    level_factor: float = 1.2
    max_iterations: int = 100
    tolerance: float = 1e-10
    initial_lambda: float = 1e-4
    max_lambda: float = 1e12

    def __post_init__(self):
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise ConfigError("ba.huber_delta", "must be positive or null")
        if self.sigma_base <= 0 or self.level_factor <= 0:
            raise ConfigError("ba.sigma_base", "noise model must be positive")

    def information(self, levels: np.ndarray) -> np.ndarray:
        sigma = self.sigma_base * self.level_factor ** np.asarray(levels, dtype=np.float64)
        return 1.0 / (sigma * sigma)

    def rho(self, chi2: np.ndarray) -> np.ndarray:
        if self.huber_delta is None:
            return chi2
        d = self.huber_delta
        return np.where(chi2 <= d * d, chi2, 2.0 * d * np.sqrt(chi2) - d * d)

    def weight(self, chi2: np.ndarray) -> np.ndarray:
        """IRLS weight rho'(chi2)"""
        if self.huber_delta is None:
            return np.ones_like(chi2)
        d = self.huber_delta
        return np.where(chi2 <= d * d, 1.0, d / np.sqrt(np.maximum(chi2, 1e-300)))


@dataclass
class BAResult:
    poses: Dict[int, CameraPose]
    points: Dict[int, np.ndarray]
    initial_cost: float
    final_cost: float
    cost_history: List[float]
    iterations: int
    converged: bool = False
    diverged: bool = False
    rank_deficient: bool = False
    excluded: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'initial_cost': self.initial_cost,
            'final_cost': self.final_cost,
            'iterations': self.iterations,
            'converged': self.converged,
            'diverged': self.diverged,
            'rank_deficient': self.rank_deficient,
            'excluded_observations': len(self.excluded),
        }


def reproject(pose: CameraPose, point: np.ndarray, cam: PinholeCamera) -> np.ndarray:
    p = pose.R @ np.asarray(point, dtype=np.float64) + pose.t
    if p[2] <= 0.0:
        raise RejectedInputError(f"point has non-positive depth {p[2]:.3g} in the camera frame")
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def reprojection_errors(problem: BAProblem) -> np.ndarray:
    """Pixel error norm per observation (nan when behind the camera)"""
    errors = np.full(len(problem.observations), np.nan)
    for i, obs in enumerate(problem.observations):
        try:
            proj = reproject(problem.poses[obs.keyframe_id], problem.points[obs.point_id], problem.camera)
        except RejectedInputError:
            continue
        errors[i] = np.linalg.norm(obs.pixel - proj)
    return errors


class _Solver:
    """LM over left-composed pose increments and additive point increments"""

    def __init__(self, problem: BAProblem, free_poses: Sequence[int], free_points: Sequence[int],
                 observations: List[Observation], robust: RobustConfig):
        self.cam = problem.camera
        self.robust = robust
        self.poses = {k: problem.poses[k].copy() for k in {o.keyframe_id for o in observations} | set(free_poses)}
        self.points = {k: np.array(problem.points[k], dtype=np.float64)
                       for k in {o.point_id for o in observations} | set(free_points)}
        self.pose_col = {k: 6 * i for i, k in enumerate(free_poses)}
        offset = 6 * len(free_poses)
        self.point_col = {k: offset + 3 * i for i, k in enumerate(free_points)}
        self.n_params = offset + 3 * len(free_points)

        self.excluded = []
        kept = []
        for i, obs in enumerate(observations):
            p = self.poses[obs.keyframe_id].R @ self.points[obs.point_id] + self.poses[obs.keyframe_id].t
            if p[2] <= 0.0:
                self.excluded.append(i)
            else:
                kept.append(obs)
        if self.excluded:
            logger.warning(f"Excluded {len(self.excluded)} observations with non-positive depth")
        self.obs = kept
        self.kf = [o.keyframe_id for o in kept]
        self.pt = [o.point_id for o in kept]
        self.pixels = np.array([o.pixel for o in kept]).reshape(-1, 2)
        self.info = robust.information([o.level for o in kept])

    def _camera_points(self, poses, points):
        R = np.array([poses[k].R for k in self.kf]).reshape(-1, 3, 3)
        t = np.array([poses[k].t for k in self.kf]).reshape(-1, 3)
        P = np.array([points[k] for k in self.pt]).reshape(-1, 3)
        return R, np.einsum('nij,nj->ni', R, P) + t

    def _residuals(self, p_cam):
        z = p_cam[:, 2]
        proj = np.stack([self.cam.fx * p_cam[:, 0] / z + self.cam.cx,
                         self.cam.fy * p_cam[:, 1] / z + self.cam.cy], axis=1)
        return self.pixels - proj

    def cost(self, poses=None, points=None) -> float:
        _, p_cam = self._camera_points(poses or self.poses, points or self.points)
        if np.any(p_cam[:, 2] <= 0.0):
            return math.inf
        r = self._residuals(p_cam)
        chi2 = self.info * np.sum(r * r, axis=1)
        return float(self.robust.rho(chi2).sum())

    def jacobian(self):
        """Sparse Jacobian of the weighted residuals and the weighted residual vector"""
        R, p_cam = self._camera_points(self.poses, self.points)
        r = self._residuals(p_cam)
        chi2 = self.info * np.sum(r * r, axis=1)
        sw = np.sqrt(self.robust.weight(chi2) * self.info)
        x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
        m = len(self.obs)
        dpi = np.zeros((m, 2, 3))
        dpi[:, 0, 0] = self.cam.fx / z
        dpi[:, 0, 2] = -self.cam.fx * x / z ** 2
        dpi[:, 1, 1] = self.cam.fy / z
        dpi[:, 1, 2] = -self.cam.fy * y / z ** 2

        rows, cols, vals = [], [], []
        row_idx = np.arange(2 * m).reshape(m, 2)
        hats = np.zeros((m, 3, 3))
        hats[:, 0, 1], hats[:, 0, 2] = -z, y
        hats[:, 1, 0], hats[:, 1, 2] = z, -x
        hats[:, 2, 0], hats[:, 2, 1] = -y, x
        # r = obs - pi(p_c); dp_c/dw = -[p_c]x, dp_c/dv = I, dp_c/dP = R
        J_pose = np.concatenate([dpi @ hats, -dpi], axis=2) * sw[:, None, None]
        J_point = -(dpi @ R) * sw[:, None, None]
        for i in range(m):
            col = self.pose_col.get(self.kf[i])
            if col is not None:
                rows.append(np.repeat(row_idx[i], 6))
                cols.append(np.tile(np.arange(col, col + 6), 2))
                vals.append(J_pose[i].reshape(-1))
            col = self.point_col.get(self.pt[i])
            if col is not None:
                rows.append(np.repeat(row_idx[i], 3))
                cols.append(np.tile(np.arange(col, col + 3), 2))
                vals.append(J_point[i].reshape(-1))
        if rows:
            J = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                  shape=(2 * m, self.n_params)).tocsr()
        else:
            J = sparse.csr_matrix((2 * m, self.n_params))
        return J, (r * sw[:, None]).reshape(-1)

    def linearize(self):
        J, rw = self.jacobian()
        H = (J.T @ J).toarray()
        b = -(J.T @ rw)
        return H, np.asarray(b).reshape(-1)

    def apply(self, delta: np.ndarray):
        poses = dict(self.poses)
        points = dict(self.points)
        for k, c in self.pose_col.items():
            poses[k] = self.poses[k].compose_left(delta[c:c + 3], delta[c + 3:c + 6])
        for k, c in self.point_col.items():
            points[k] = self.points[k] + delta[c:c + 3]
        return poses, points

    @staticmethod
    def _is_rank_deficient(H: np.ndarray) -> bool:
        if H.size == 0:
            return False
        scale = max(float(np.max(np.abs(np.diag(H)))), 1e-300)
        try:
            cho_factor(H + 1e-12 * scale * np.eye(len(H)))
        except LinAlgError:
            return True
        return bool(np.linalg.matrix_rank(H, tol=1e-10 * scale) < len(H))

    @staticmethod
    def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
        try:
            return cho_solve(cho_factor(A), b)
        except LinAlgError:
            return lstsq(A, b)[0]

    def run(self) -> BAResult:
        cost = self.cost()
        history = [cost]
        result = BAResult(self.poses, self.points, cost, cost, history, 0, excluded=list(self.excluded))
        lam = self.robust.initial_lambda
        warned = False
        for it in range(self.robust.max_iterations):
            result.iterations = it + 1
            if cost == 0.0:
                result.converged = True
                break
            H, b = self.linearize()
            if it == 0 and self._is_rank_deficient(H):
                result.rank_deficient = True
                logger.warning("Normal equations are rank deficient; continuing with damping")
            accepted = False
            while True:
                delta = self._solve(H + lam * np.eye(self.n_params), b)
                if np.linalg.norm(delta) < self.robust.tolerance:
                    result.converged = True
                    break
                poses, points = self.apply(delta)
                new_cost = self.cost(poses, points)
                if new_cost < cost:
                    self.poses, self.points, cost = poses, points, new_cost
                    history.append(cost)
                    lam = max(lam / 10.0, 1e-12)
                    accepted = True
                    break
                lam *= 10.0
                if lam > self.robust.max_lambda:
                    result.diverged = True
                    if not warned:
                        logger.warning("LM damping hit its cap; returning the last accepted estimate")
                        warned = True
                    break
            if result.converged or result.diverged or not accepted:
                break
        result.poses, result.points = self.poses, self.points
        result.final_cost = cost
        return result


def _observations_of(problem: BAProblem, keyframe_ids: Iterable[int]) -> List[Observation]:
    ids = set(keyframe_ids)
    return [o for o in problem.observations if o.keyframe_id in ids]


def motion_only_ba(problem: BAProblem, keyframe_id: int, initial: CameraPose = None,
                   robust: RobustConfig = None) -> BAResult:
    """Refine one pose against fixed points"""
    robust = robust or RobustConfig()
    problem.validate()
    work = problem
    if initial is not None:
        work = BAProblem(dict(problem.poses), problem.points, problem.observations,
                         problem.camera, problem.fixed_pose_ids)
        work.poses[keyframe_id] = initial.copy()
    observations = _observations_of(work, [keyframe_id])
    solver = _Solver(work, [keyframe_id], [], observations, robust)
    if len(solver.obs) < 6:
        raise UnderdeterminedError(f"motion-only BA needs at least 6 observations, "
                                   f"keyframe {keyframe_id} has {len(solver.obs)}")
    result = solver.run()
    result.poses = {**work.poses, keyframe_id: result.poses[keyframe_id]}
    result.points = dict(work.points)
    return result


def local_ba(problem: BAProblem, window: Sequence[int], robust: RobustConfig = None) -> BAResult:
    """Joint refinement of window poses and every point they observe.

    Keyframes outside the window that see those points contribute residuals
    with their poses held fixed.
    """
    robust = robust or RobustConfig()
    problem.validate()
    window = [k for k in window]
    if not window:
        raise UnderdeterminedError("local BA window is empty")
    if len(window) == 1:
        return motion_only_ba(problem, window[0], robust=robust)

    point_ids = sorted({o.point_id for o in _observations_of(problem, window)})
    point_set = set(point_ids)
    observations = [o for o in problem.observations if o.point_id in point_set]
    observers = {o.keyframe_id for o in observations}

    fixed = set(problem.fixed_pose_ids) | (observers - set(window))
    free_poses = [k for k in window if k not in fixed]
    if not fixed & observers:
        free_poses = [k for k in free_poses if k != window[0]]
    solver = _Solver(problem, free_poses, point_ids, observations, robust)
    result = solver.run()
    result.poses = {**problem.poses, **{k: result.poses[k] for k in free_poses}}
    result.points = {**problem.points, **{k: result.points[k] for k in point_ids}}
    logger.info(f"Local BA over {len(free_poses)} poses and {len(point_ids)} points: "
                f"cost {result.initial_cost:.4g} -> {result.final_cost:.4g} in {result.iterations} iterations")
    return result


def global_ba(problem: BAProblem, robust: RobustConfig = None) -> BAResult:
    """All keyframes and points; the origin keyframe is held fixed unless others already are"""
    ids = sorted(problem.poses)
    fixed = set(problem.fixed_pose_ids) or {ids[0]}
    gauge = BAProblem(problem.poses, problem.points, problem.observations, problem.camera, fixed)
    return local_ba(gauge, ids, robust)


def covisible_window(problem: BAProblem, keyframe_id: int, min_shared: float = 0.1) -> List[int]:
    """Keyframe plus every keyframe sharing at least `min_shared` of its points"""
    own = {o.point_id for o in problem.observations if o.keyframe_id == keyframe_id}
    if not own:
        return [keyframe_id]
    shared: Dict[int, Set[int]] = {}
    for o in problem.observations:
        if o.keyframe_id != keyframe_id and o.point_id in own:
            shared.setdefault(o.keyframe_id, set()).add(o.point_id)
    others = sorted(k for k, pts in shared.items() if len(pts) >= min_shared * len(own))
    return [keyframe_id] + others


def triangulate_points(poses: Dict[int, CameraPose], observations: List[Observation],
                       cam: PinholeCamera) -> Dict[int, np.ndarray]:
    """Linear (DLT) triangulation of every point seen by two or more keyframes"""
    by_point: Dict[int, List[Observation]] = {}
    for obs in observations:
        by_point.setdefault(obs.point_id, []).append(obs)
    K = cam.K
    projections = {k: K @ np.hstack([p.R, p.t[:, None]]) for k, p in poses.items()}
    points = {}
    for pid, obs_list in by_point.items():
        if len(obs_list) < 2:
            continue
        rows = []
        for obs in obs_list:
            P = projections[obs.keyframe_id]
            u, v = obs.pixel
            rows.append(u * P[2] - P[0])
            rows.append(v * P[2] - P[1])
        _, _, vt = np.linalg.svd(np.array(rows))
        X = vt[-1]
        if abs(X[3]) < 1e-12:
            continue
        points[pid] = X[:3] / X[3]
    return points


def _centers(trajectory) -> np.ndarray:
    if isinstance(trajectory, np.ndarray):
        return np.asarray(trajectory, dtype=np.float64).reshape(-1, 3)
    return np.array([p.center if isinstance(p, CameraPose) else np.asarray(p, dtype=np.float64)
                     for p in trajectory]).reshape(-1, 3)


def align_trajectory(est: np.ndarray, gt: np.ndarray, similarity: bool = False):
    """Closed-form (s, R, t) minimising ||s R est + t - gt||"""
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    X, Y = est - mu_e, gt - mu_g
    cov = Y.T @ X / len(est)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = 1.0
    if similarity:
        var = np.mean(np.sum(X * X, axis=1))
        scale = float(np.trace(np.diag(D) @ S) / var) if var > 0 else 1.0
    t = mu_g - scale * R @ mu_e
    return scale, R, t


def ate_rmse(estimated, ground_truth, similarity: bool = False) -> float:
    """Absolute trajectory error RMSE in centimetres after rigid (or similarity) alignment"""
    est, gt = _centers(estimated), _centers(ground_truth)
    if len(est) != len(gt):
        raise RejectedInputError(f"trajectories differ in length ({len(est)} vs {len(gt)})")
    if len(est) < 3:
        raise UnderdeterminedError("ATE needs at least 3 poses")
    scale, R, t = align_trajectory(est, gt, similarity)
    aligned = scale * est @ R.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))) * 100.0)
