import numpy as np
import pytest

from shapecorr.geometry import Mesh


def central_difference(f, x, h=1e-5):
    """Gradient of scalar f at array x by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def sampled_fd_grad(f, x, indices, h=1e-5):
    """Central-difference gradient of scalar f at the given flat indices of x."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def rel_error(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


@pytest.fixture
def tetrahedron():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(verts, faces)


def equilateral_grid(nx=5, ny=5):
    """Flat mesh of equilateral triangles with unit edge length."""
    verts = []
    for j in range(ny):
        for i in range(nx):
            verts.append([i + 0.5 * j, j * np.sqrt(3) / 2, 0.0])
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b = a + 1
            c = a + nx
            d = c + 1
            faces.append([a, b, c])
            faces.append([b, d, c])
    return Mesh(np.array(verts), np.array(faces))
