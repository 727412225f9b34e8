"""Projecting descriptors onto subject areas and scoring article diversity.

Run:  python demos/01_projection_and_diversity.py
"""
# %% a tiny descriptor file: id, heading, tree locators
from meshforge.ontology import article_sa, parse_ontology, project_l1, project_l2

tree = parse_ontology(
    "D009765\tObesity\tC18.654.726.500;C23.888.144.699.500;E01.370.600.115.100.160.120.699.500;G07.203.100.700\n"
    "D003920\tDiabetes Mellitus\tC18.452.394.750;C19.246\n"
    "D005260\tFemale\tA01.908\n"
)

# %% one descriptor, two resolutions
print(project_l1(tree, "D009765").as_dict())   # branch letters, with multiplicity
print(project_l2(tree, "D009765").as_dict())   # first locator segment

# %% an article is the sum of its descriptors' projections
sa = article_sa(tree, ["D009765", "D003920", "D005260"], level=1)
print(sa.as_dict())

# %% diversity of a count vector: 0 for a single category, bounded by (d-1)/(d+1)
import numpy as np

from meshforge.diversity import f_d, f_d_bound, f_d_matrix

print(f"f_d(article)    = {f_d(sa):.4f}")
print(f"matrix path     = {f_d_matrix(sa):.4f}")
print(f"single category = {f_d([0, 4, 0, 0])}")
print(f"uniform over 10 = {f_d(np.ones(10)):.4f}  bound {f_d_bound(10):.4f}")

# %% diversity grows with spread, not with total count
for c in ([5, 0, 0], [5, 5, 0], [5, 5, 5], [50, 50, 50]):
    print(c, round(f_d(c), 4))
