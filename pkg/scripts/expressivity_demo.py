"""Show QP layers reproducing ReLU, max-affine and piecewise-linear functions."""

import numpy as np

from optlayer.layers import max_affine_layer, piecewise_linear_layer, relu_as_qp


def main():
    xs = np.linspace(-2.0, 2.0, 9)
    relu = relu_as_qp(xs.size)
    print("relu   max err:", np.abs(relu.forward(xs)[0] - np.maximum(xs, 0)).max())

    pl = piecewise_linear_layer([[1.0, -1.0]], [[1.0, 1.0]], [[0.0, -1.0]])
    ref = np.maximum(xs, 0) - np.maximum(xs - 1, 0)
    got = np.array([pl.forward(np.array([x]))[0][0] for x in xs])
    print("pwl    max err:", np.abs(got - ref).max(), "params:", pl.n_parameters)

    A = np.array([[1.0, 0.0], [-1.0, 0.0], [0.5, 1.0]])
    ma = max_affine_layer(A)
    grid = np.array([[a, b] for a in xs for b in xs])
    got = np.array([ma.forward(x)[0][0] for x in grid])
    ref = np.maximum(0.0, (grid @ A.T).max(axis=1))
    print("maxaff max err:", np.abs(got - ref).max(), "params:", ma.n_parameters)


if __name__ == "__main__":
    main()
