"""Built-in experiment configurations (``sieve-homog list-fixtures``)."""

FIXTURES = {
    "discrepancy-parabola": ("mod-1 sequence of x^2/2 on [1, 2), six dyadic eps", """\
[experiment]
kind = discrepancy
seed = 0

[model]
d = 2
p = 1.3

[surface]
kind = quadratic
hessian = 1
domain_low = -3
domain_high = 3

[sieve]
eps = 2^-4 2^-5 2^-6 2^-7 2^-8 2^-9

[region]
q_low = 1
q_high = 2
interval = 0 0.3
"""),
    "capacity-ball": ("concentric-ball condenser, d=3, p=2, R=4", """\
[experiment]
kind = capacity

[model]
d = 3
p = 2

[hole]
kind = ball
radius = 1

[grid]
R = 4
h = 0.25
levels = 3
"""),
    "capacity-disk-p13": ("disk condenser in the plane, p=1.3", """\
[experiment]
kind = capacity

[model]
d = 2
p = 1.3

[hole]
kind = ball
radius = 0.5

[grid]
R = 2
h = 0.0625
levels = 3
"""),
    "mean-cap-ball": ("mean capacity of the unit ball along three normals", """\
[experiment]
kind = mean-cap

[model]
d = 3
p = 2

[hole]
kind = ball
radius = 1

[capacity]
normals = 0 0 1; 1 1 1; 1 0 2

[tolerance]
quad_tol = 0.02
"""),
    "corrector-plane": ("corrector energies along a tilted plane, d=3, p=2", """\
[experiment]
kind = corrector

[model]
d = 3
p = 2

[surface]
kind = plane
slope = 0.41421356237309503 0.2320508075688772
constant = 0.1

[hole]
kind = ball
radius = 0.5

[sieve]
eps = 2^-3 2^-4

[region]
q_low = 0 0
q_high = 0.5 0.5
"""),
    "homogenize-parabola": ("perforated vs homogenized obstacle problem, d=2, p=1.3", """\
[experiment]
kind = homogenize

[model]
d = 2
p = 1.3

[surface]
# curvature sqrt(5): an irrational second derivative keeps the cell
# offsets g(eps k)/eps from locking onto a few residues on dyadic eps
kind = quadratic
hessian = 2.23606797749979
linear = -1.118033988749895
constant = 0.6295084971874737
domain_low = -0.5
domain_high = 1.5

[hole]
kind = ball
radius = 0.5

[sieve]
eps = 2^-3 2^-4 2^-5

[domain]
low = 0 0
high = 1 1

[obstacle]
center = 0.5 0.4
radius = 0.35
height = 1

[grid]
grid_factor = 8
"""),
    "tangent-gap-parabola": ("tangent-plane capacity gap on x^2/2, d=2, p=1.3", """\
[experiment]
kind = sweep

[model]
d = 2
p = 1.3

[surface]
kind = quadratic
hessian = 1
domain_low = -3
domain_high = 3

[hole]
kind = ball
radius = 0.5

[sieve]
eps = 2^-4 2^-6 2^-8

[region]
center = 1
"""),
}
