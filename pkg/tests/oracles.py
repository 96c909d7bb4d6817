"""Independent reference implementations in plain numpy/scipy.

These deliberately avoid the package's torch code paths: rotations come from
scipy, forward kinematics recurses from the leaves up, and the energy terms
are written as explicit loops.
"""
import numpy as np
from scipy.spatial.transform import Rotation


def rot(axis, angle):
    return Rotation.from_rotvec(np.asarray(axis, float) * angle).as_matrix()


def fk_recursive(parents, axes, links, r0, p0, q):
    """Global joint positions for one frame; q[j-1] drives joint j."""
    parents = list(parents)

    def frame(j):
        if j == 0:
            return Rotation.from_rotvec(np.array(r0, float)).as_matrix(), np.array(p0, float)
        R_a, P_a = frame(parents[j])
        return R_a @ rot(axes[j], q[j - 1]), P_a + R_a @ links[j]

    return np.array([frame(j)[1] for j in range(len(parents))])


def fk_clip(g, data):
    data = np.asarray(data)
    out = []
    for t in range(data.shape[0]):
        out.append(fk_recursive(g.parent_index, g.axes, g.link_vectors, data[t, 0, 0:3],
                                data[t, 0, 3:6], data[t, 1:g.joint_count, 0]))
    return np.array(out)


def positions_of(data, J):
    data = np.asarray(data)
    pos = np.empty(data.shape[:1] + (J, 3))
    pos[:, 0] = data[:, 0, 3:6]
    pos[:, 1:] = data[:, 1:J, 1:4]
    return pos


def energy_terms(data, g, ref_data, pairs, alpha, valid, w=(100.0, 1.0, 900.0, 1.0), eps=1e-8):
    """(similar, cst, vel, norm) by explicit loops."""
    J = g.joint_count
    fk = fk_clip(g, data)
    stored = positions_of(data, J)
    target = positions_of(ref_data, ref_data.shape[1]) * alpha
    T = fk.shape[0]
    similar = cst = vel = norm = 0.0
    for t in range(T):
        if not valid[t]:
            continue
        for a, b in pairs:
            similar += np.sum((fk[t, b] - target[t, a]) ** 2)
        cst += np.sum((fk[t] - stored[t]) ** 2)
    for t in range(1, T):
        if not (valid[t] and valid[t - 1]):
            continue
        for a, b in pairs:
            d = (fk[t, b] - fk[t - 1, b]) - (target[t, a] - target[t - 1, a])
            vel += np.sum(d ** 2)
        for j in range(J):
            norm += np.sqrt(np.sum((fk[t, j] - fk[t - 1, j]) ** 2) + eps ** 2)
    for j in range(1, J):
        traj = np.array([data[t, j, 0] if valid[t] else 0.0 for t in range(T)])
        norm += np.sqrt(np.sum(traj ** 2) + eps ** 2)
    return w[0] * similar, w[1] * cst, w[2] * vel, w[3] * norm
