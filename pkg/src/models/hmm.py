#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
后脉冲隐马尔可夫模型模块 - 负责构造9状态基本块、模式组合、会话转移矩阵，
求解平稳分布并给出HMM修正后的观测概率及其梯度
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy import linalg, sparse

from src.models.detection import OutcomeProbs, _outcome_cells, conditional_outcome_probs
from src.utils.errors import ConvergenceError, DomainError

logger = logging.getLogger(__name__)

N_STATES = 9

# 第一个下标为探测器1，第二个为探测器0；^ 表示后脉冲
STATE_LABELS = ("S00", "S01", "S10", "S11", "S0^1", "S1^0", "S11^", "S1^1", "S1^1^")

# 每个状态对应的观测结果编号（00, 01, 10, 11）
_EMITTED = (0, 1, 2, 3, 1, 2, 3, 3, 3)
EMISSION = np.zeros((N_STATES, 4))
EMISSION[np.arange(N_STATES), _EMITTED] = 1.0


@dataclass(frozen=True)
class BaseBlock:
    """单一模式下的 9×9 转移块 T(p, q)"""

    matrix: np.ndarray
    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class TransitionModel:
    """
    会话级转移矩阵

    Attributes:
        matrix: 稀疏行随机矩阵（CSR）
        modes: 模式标签列表，状态下标为 mode·9 + s
        form: full / compact / bit / custom
        weights: 各模式的边缘概率
        mode_probs: 各模式的结果概率 p（形状 M×4）
    """

    matrix: sparse.csr_matrix
    modes: List[Tuple[int, ...]]
    form: str
    weights: Optional[np.ndarray] = None
    mode_probs: Optional[np.ndarray] = None
    emission: np.ndarray = field(default_factory=lambda: EMISSION)

    @property
    def n_states(self):
        return self.matrix.shape[0]

    @property
    def n_modes(self):
        return len(self.modes)


@dataclass(frozen=True)
class StationaryDist:
    """平稳分布 v̄，附带残差与迭代次数"""

    vector: np.ndarray
    residual: float
    iterations: int


def _coefficients(q):
    q0, q1 = q
    return {
        "one": 1.0,
        "q0c": 1.0 - q0,
        "q0": q0,
        "q1c": 1.0 - q1,
        "q1": q1,
        "q00": (1.0 - q0) * (1.0 - q1),
        "q01": q0 * (1.0 - q1),
        "q10": q1 * (1.0 - q0),
        "q11": q0 * q1,
    }


def _coefficient_derivatives(q, j):
    """系数对后脉冲概率 q_j 的导数"""
    q0, q1 = q
    if j == 0:
        return {
            "one": 0.0, "q0c": -1.0, "q0": 1.0, "q1c": 0.0, "q1": 0.0,
            "q00": -(1.0 - q1), "q01": 1.0 - q1, "q10": -q1, "q11": q1,
        }
    return {
        "one": 0.0, "q0c": 0.0, "q0": 0.0, "q1c": -1.0, "q1": 1.0,
        "q00": -(1.0 - q0), "q01": -q0, "q10": 1.0 - q0, "q11": q0,
    }


def _assemble(p, c):
    """
    按系数 c 组装转移块；对 p 与 c 均为线性，因而同一函数也用于求导
    """
    p = np.asarray(p, dtype=float)
    p0_ = p[0] + p[1]  # 探测器1未点击
    p1_ = p[2] + p[3]
    p_0 = p[0] + p[2]  # 探测器0未点击
    p_1 = p[1] + p[3]
    T = np.zeros((N_STATES, N_STATES))
    for row in (0, 4, 5, 8):
        T[row, :4] = c["one"] * p
    T[1, :4] = c["q0c"] * p
    T[1, 4] = c["q0"] * p0_
    T[1, 6] = c["q0"] * p1_
    T[2, :4] = c["q1c"] * p
    T[2, 5] = c["q1"] * p_0
    T[2, 7] = c["q1"] * p_1
    T[3, :4] = c["q00"] * p
    T[3, 4] = c["q01"] * p0_
    T[3, 6] = c["q01"] * p1_
    T[3, 5] = c["q10"] * p_0
    T[3, 7] = c["q10"] * p_1
    T[3, 8] = c["q11"] * p.sum()
    T[6] = T[2]
    T[7] = T[1]
    return T


def base_block(p, q):
    """
    构造 9×9 基本转移块 T(p, q)

    Args:
        p (array): 结果概率 (p00, p01, p10, p11)
        q (array): 两个探测器的后脉冲概率

    Returns:
        BaseBlock: 转移块
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (4,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-10:
        raise DomainError(f"p 必须为和为1的四维概率向量: {p}")
    if q.shape != (2,) or np.any(q < 0) or np.any(q >= 1):
        raise DomainError(f"q 必须位于[0,1)²: {q}")
    return BaseBlock(matrix=_assemble(p, _coefficients(q)), p=p, q=q)


def single_detector_block(p, q):
    """
    单探测器的3状态转移矩阵（未点击、点击、后脉冲）

    Args:
        p (float): 真实点击概率
        q (float): 后脉冲概率

    Returns:
        numpy.ndarray: 3×3 转移矩阵
    """
    return np.array(
        [
            [1.0 - p, p, 0.0],
            [(1.0 - q) * (1.0 - p), (1.0 - q) * p, q],
            [1.0 - p, p, 0.0],
        ]
    )


def compose_modes(blocks, mode_transition, modes=None, form="custom"):
    """
    组合多个模式的转移块：块 (m -> m') = P(m'|m)·T_{m'}

    Args:
        blocks (list): 各模式的 9×9 转移块（ndarray 或 BaseBlock）
        mode_transition (array): 模式转移矩阵（行随机）
        modes (list): 模式标签
        form (str): 形式标签

    Returns:
        TransitionModel: 组合后的转移模型
    """
    mats = [b.matrix if isinstance(b, BaseBlock) else np.asarray(b, dtype=float) for b in blocks]
    W = np.atleast_2d(np.asarray(mode_transition, dtype=float))
    n_modes = len(mats)
    if W.shape != (n_modes, n_modes):
        raise DomainError(f"模式转移矩阵尺寸 {W.shape} 与块数量 {n_modes} 不匹配")
    if any(m.shape != mats[0].shape for m in mats):
        raise DomainError("所有转移块必须同尺寸")
    if np.any(W < 0) or np.any(np.abs(W.sum(axis=1) - 1.0) > 1e-12):
        raise DomainError("模式转移矩阵必须为行随机矩阵")

    if np.allclose(W, W[0], rtol=0.0, atol=0.0):
        # 各行相同：源模式无关，所有块行重复
        row = sparse.hstack([sparse.csr_matrix(w * m) for w, m in zip(W[0], mats)])
        matrix = sparse.kron(np.ones((n_modes, 1)), row)
    else:
        matrix = sparse.bmat([[sparse.csr_matrix(W[i, j] * mats[j]) for j in range(n_modes)] for i in range(n_modes)])
    matrix = sparse.csr_matrix(matrix)
    matrix.eliminate_zeros()
    return TransitionModel(
        matrix=matrix,
        modes=list(modes) if modes is not None else [(i,) for i in range(n_modes)],
        form=form,
    )


def _mode_table(theta, form, names=()):
    """
    各模式的权重、结果概率及其梯度

    Returns:
        tuple: (modes, weights, probs(M,4), grads{name: (M,4)})
    """
    n_lambda = theta.alice.n_lambda
    if form == "compact":
        probs, grads = conditional_outcome_probs(theta, names)
        modes = list(itertools.product(range(2), range(n_lambda)))
        weights = np.full(len(modes), 0.5 / n_lambda)
    elif form == "bit":
        probs, grads = conditional_outcome_probs(theta, names, resolve_bit=True)
        modes = list(itertools.product(range(2), range(2), range(n_lambda)))
        weights = np.full(len(modes), 0.25 / n_lambda)
    elif form == "full":
        if names:
            raise DomainError("full 形式不提供梯度，请使用 compact 形式")
        lam = np.asarray(theta.alice.intensities)
        grid = np.ix_(range(2), range(2), range(2), range(2), range(n_lambda))
        a, b, x, e, l_idx = (g.astype(float) for g in grid)
        probs, grads = _outcome_cells(theta, a, b, x, e, lam[l_idx.astype(int)])
        modes = list(itertools.product(range(2), range(2), range(2), range(2), range(n_lambda)))
        delta = theta.eve.intercept_fraction
        w_e = np.array([1.0 - delta, delta])
        weights = np.array([w_e[m[3]] / (8.0 * n_lambda) for m in modes])
    else:
        raise DomainError(f"未知的转移矩阵形式: {form}")
    return modes, weights, probs.reshape(len(modes), 4), {k: g.reshape(len(modes), 4) for k, g in grads.items()}


def full_transition(theta, form="compact"):
    """
    构造会话级转移矩阵

    Args:
        theta (SystemParams): 系统参数
        form (str): full（144·N_λ 状态）、compact（18·N_λ）或 bit（36·N_λ，保留数据比特）

    Returns:
        TransitionModel: 转移模型
    """
    modes, weights, probs, _ = _mode_table(theta, form)
    coef = _coefficients(theta.bob.afterpulse)
    blocks = [_assemble(p, coef) for p in probs]
    model = compose_modes(blocks, np.tile(weights, (len(modes), 1)), modes=modes, form=form)
    return TransitionModel(
        matrix=model.matrix, modes=modes, form=form, weights=weights, mode_probs=probs
    )


def stationary(T, tol=1e-12, max_iter=100_000, start=None):
    """
    幂迭代求平稳分布 v̄ = Tᵀ v̄（从均匀分布出发）

    Args:
        T (TransitionModel): 转移模型
        tol (float): 残差 ‖Tᵀv - v‖∞ 的阈值
        max_iter (int): 最大迭代次数
        start (array): 初始向量，缺省为均匀分布

    Returns:
        StationaryDist: 平稳分布
    """
    matrix_t = T.matrix.transpose().tocsr()
    n = T.n_states
    v = np.full(n, 1.0 / n) if start is None else np.asarray(start, dtype=float) / np.sum(start)
    residual = np.inf
    for iteration in range(max_iter + 1):
        nxt = matrix_t @ v
        residual = float(np.max(np.abs(nxt - v)))
        if residual < tol:
            return StationaryDist(vector=v, residual=residual, iterations=iteration)
        v = nxt / nxt.sum()
    raise ConvergenceError(
        f"幂迭代在 {max_iter} 次内未收敛，残差 {residual:.3e}", residual=residual, iterations=max_iter
    )


def fold(T, v):
    """将状态向量折叠为 (模式, 9) 并经发射矩阵投影为各模式的结果概率 (M, 4)"""
    return np.asarray(v).reshape(T.n_modes, N_STATES) @ T.emission


def _fold_to_cells(theta, form, per_mode):
    n_lambda = theta.alice.n_lambda
    if form == "compact":
        table = per_mode.reshape(2, n_lambda, 4)
    elif form == "bit":
        table = per_mode.reshape(2, 2, n_lambda, 4).sum(axis=1)
    else:
        full = per_mode.reshape(2, 2, 2, 2, n_lambda, 4).sum(axis=(2, 3))
        table = np.stack([full[0, 1] + full[1, 0], full[0, 0] + full[1, 1]])
    return np.transpose(table, (0, 2, 1)).reshape(-1)


def hmm_prob_vector(theta, form="compact", gradient_names: Iterable[str] = (), tol=1e-12, max_iter=100_000):
    """
    HMM修正后的 8·N_λ 单元观测概率向量

    Args:
        theta (SystemParams): 系统参数
        form (str): 转移矩阵形式
        gradient_names (Iterable[str]): 需要梯度的扁平参数名（仅 compact/bit 形式）
        tol (float): 平稳分布残差阈值
        max_iter (int): 幂迭代最大次数

    Returns:
        OutcomeProbs: 概率向量（及梯度）
    """
    T = full_transition(theta, form)
    dist = stationary(T, tol=tol, max_iter=max_iter)
    cells = _fold_to_cells(theta, form, fold(T, dist.vector))
    gradient = {}
    if gradient_names:
        gradient = stationary_grad(theta, gradient_names, form=form, model=T, dist=dist)
    return OutcomeProbs(cells=cells, n_lambda=theta.alice.n_lambda, gradient=gradient)


def bit_resolved_probs(theta, tol=1e-12, max_iter=100_000):
    """
    由保留数据比特的转移矩阵求得的条件结果概率 P(o | m, x, λ)

    Returns:
        numpy.ndarray: 形状 (2, 2, N_λ, 4)
    """
    T = full_transition(theta, "bit")
    dist = stationary(T, tol=tol, max_iter=max_iter)
    per_mode = fold(T, dist.vector) / T.weights[:, None]
    return per_mode.reshape(2, 2, theta.alice.n_lambda, 4)


def stationary_grad(theta, names: Iterable[str], form="compact", model=None, dist=None):
    """
    HMM观测概率对参数的梯度：求解 (I - Tᵀ + v̄·1ᵀ) dv = (∂Tᵀ/∂θ) v̄ 后折叠投影

    Args:
        theta (SystemParams): 系统参数
        names (Iterable[str]): 扁平参数名
        form (str): compact 或 bit
        model (TransitionModel): 已构造的转移模型（可选）
        dist (StationaryDist): 已求得的平稳分布（可选）

    Returns:
        dict: 参数名 -> 8·N_λ 维梯度向量
    """
    names = tuple(names)
    if form not in ("compact", "bit"):
        raise DomainError("梯度仅支持 compact 或 bit 形式")
    T = model if model is not None else full_transition(theta, form)
    v = (dist if dist is not None else stationary(T)).vector

    inner = tuple(n for n in names if not n.startswith("afterpulse_"))
    _, weights, probs, dprobs = _mode_table(theta, form, inner)
    q = theta.bob.afterpulse
    coef = _coefficients(q)
    n = T.n_states
    system = np.eye(n) - T.matrix.transpose().toarray() + np.outer(v, np.ones(n))
    lu = linalg.lu_factor(system)
    # 源模式无关，只需各检测状态的总质量
    u = v.reshape(T.n_modes, N_STATES).sum(axis=0)

    result = {}
    for name in names:
        if name.startswith("afterpulse_"):
            dcoef = _coefficient_derivatives(q, int(name[-1]))
            d_blocks = [_assemble(p, dcoef) for p in probs]
        else:
            d_blocks = [_assemble(dp, coef) for dp in dprobs[name]]
        rhs = np.concatenate([w * (dB.T @ u) for w, dB in zip(weights, d_blocks)])
        if not np.any(rhs):
            result[name] = np.zeros(8 * theta.alice.n_lambda)
            continue
        dv = linalg.lu_solve(lu, rhs)
        result[name] = _fold_to_cells(theta, form, fold(T, dv))
    return result


if __name__ == "__main__":
    block = base_block([0.1, 0.7, 0.1, 0.1], [0.1, 0.1])
    print("基本块非零元素个数:", np.count_nonzero(block.matrix))
    print("行和:", block.matrix.sum(axis=1))
    model = compose_modes([block, base_block([0.7, 0.1, 0.1, 0.1], [0.1, 0.1])], np.full((2, 2), 0.5))
    print("组合后状态数:", model.n_states)
    dist = stationary(model)
    print(f"平稳分布残差 {dist.residual:.2e}，迭代 {dist.iterations} 次")
