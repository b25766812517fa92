#!/usr/bin/env python3
"""Generate the offline QM9-layout fixture corpus used by the test suites.

Real QM9 files and live PubChem responses are not available offline, so this
script builds a corpus in the exact QM9 extended-XYZ layout from randomly
enumerated small C/N/O/F molecules:

  * geometry: RDKit ETKDG embedding + MMFF94 relaxation
  * mu, homo, lumo, gap, r2, Mulliken charges, electronic energy: RHF/STO-3G (PySCF)
  * frequencies, zpve, U/H/G at 298.15 K, Cv: rigid-rotor harmonic-oscillator
    analysis on a finite-difference MMFF Hessian
  * alpha: additive atomic polarizabilities (Miller) converted to Bohr^3
  * A, B, C: from the principal moments of inertia

It also writes a warm PubChem cache snapshot in the client's on-disk format.
Descriptors come from RDKit (Crippen logP stands in for XLogP); CIDs of the
generated molecules are in a reserved 9xxxxxxxx range and are not real PubChem
CIDs. Methane (gdb 1) carries its real PubChem record (CID 297).

Usage: make_qm9_fixture.py OUT_DIR [--count 1000] [--seed 7]
"""

import argparse
import hashlib
import json
import math
import os
import random

import numpy as np
from pyscf import gto, scf
from rdkit import Chem, RDLogger
from rdkit.Chem import AllChem, Crippen, Descriptors, Lipinski, rdMolDescriptors

RDLogger.DisableLog("rdApp.*")

VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1}
ELEMENT_WEIGHTS = [("C", 0.62), ("N", 0.14), ("O", 0.19), ("F", 0.05)]
# Miller atomic hybrid polarizabilities, Angstrom^3.
POLARIZABILITY = {"H": 0.387, "C": 1.061, "N": 1.090, "O": 0.637, "F": 0.296}
ANG3_TO_BOHR3 = 1.0 / 0.529177210903 ** 3

HARTREE_J = 4.3597447222071e-18
KB = 1.380649e-23
H_PLANCK = 6.62607015e-34
C_LIGHT = 2.99792458e10  # cm/s
AMU = 1.66053906660e-27
NA = 6.02214076e23
R_CAL = 1.98720425864083  # cal/(mol K)
T298 = 298.15
P_ATM = 101325.0


def pick_element(rng):
    r = rng.random()
    acc = 0.0
    for sym, w in ELEMENT_WEIGHTS:
        acc += w
        if r <= acc:
            return sym
    return "C"


def random_smiles(rng):
    n_heavy = rng.choices(range(1, 8), weights=[1, 2, 4, 6, 8, 9, 9])[0]
    rw = Chem.RWMol()
    elems = []
    order = {}

    def free(i):
        used = sum(order.get(tuple(sorted((i, j))), 0) for j in range(len(elems)))
        return VALENCE[elems[i]] - used

    for k in range(n_heavy):
        sym = pick_element(rng) if k else rng.choice(["C", "C", "C", "N", "O"])
        candidates = [i for i in range(len(elems)) if free(i) > 0]
        if k and not candidates:
            break
        if k and sym == "F" and len(candidates) == 0:
            break
        elems.append(sym)
        rw.AddAtom(Chem.Atom(sym))
        if k:
            parent = rng.choice(candidates)
            order[(parent, k)] = 1
    if len(elems) > 3 and rng.random() < 0.35:
        pairs = [(i, j) for i in range(len(elems)) for j in range(i + 2, len(elems))
                 if (i, j) not in order and free(i) > 0 and free(j) > 0]
        if pairs:
            order[rng.choice(pairs)] = 1
    for _ in range(2):
        if rng.random() < 0.45:
            bonds = [b for b in order if free(b[0]) > 0 and free(b[1]) > 0]
            if bonds:
                b = rng.choice(bonds)
                order[b] += 1
    for (i, j), o in order.items():
        rw.AddBond(i, j, {1: Chem.BondType.SINGLE, 2: Chem.BondType.DOUBLE,
                          3: Chem.BondType.TRIPLE}[o])
    mol = rw.GetMol()
    try:
        Chem.SanitizeMol(mol)
    except Exception:
        return None
    return Chem.MolToSmiles(mol)


def embed(smiles, seed):
    mol = Chem.AddHs(Chem.MolFromSmiles(smiles))
    params = AllChem.ETKDGv3()
    params.randomSeed = seed
    if AllChem.EmbedMolecule(mol, params) != 0:
        return None
    if not AllChem.MMFFHasAllMoleculeParams(mol):
        return None
    props = AllChem.MMFFGetMoleculeProperties(mol)
    ff = AllChem.MMFFGetMoleculeForceField(mol, props)
    ff.Minimize(maxIts=5000, forceTol=1e-6, energyTol=1e-10)
    return mol


def mmff_gradient(mol, flat):
    work = Chem.Mol(mol)
    conf = work.GetConformer()
    for i in range(work.GetNumAtoms()):
        conf.SetAtomPosition(i, tuple(flat[3 * i:3 * i + 3]))
    props = AllChem.MMFFGetMoleculeProperties(work)
    return np.array(AllChem.MMFFGetMoleculeForceField(work, props).CalcGrad())


def mmff_hessian(mol):
    x0 = np.array(mol.GetConformer().GetPositions()).ravel()
    n = x0.size
    h = 1e-4
    hess = np.zeros((n, n))
    for k in range(n):
        xp = x0.copy()
        xp[k] += h
        xm = x0.copy()
        xm[k] -= h
        hess[k] = (mmff_gradient(mol, xp) - mmff_gradient(mol, xm)) / (2 * h)
    return 0.5 * (hess + hess.T)  # kcal/mol/A^2


def harmonic_frequencies(mol, coords, masses):
    natom = len(masses)
    if natom == 1:
        return []
    hess = mmff_hessian(mol)
    m3 = np.repeat(masses, 3)
    mw = hess / np.sqrt(np.outer(m3, m3))  # kcal/mol/A^2/amu
    # Project out rigid-body motions.
    com = (coords * masses[:, None]).sum(0) / masses.sum()
    rel = coords - com
    basis = []
    for ax in range(3):
        v = np.zeros((natom, 3))
        v[:, ax] = 1.0
        basis.append((v * np.sqrt(masses)[:, None]).ravel())
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = 1.0
        v = np.cross(e, rel)
        basis.append((v * np.sqrt(masses)[:, None]).ravel())
    b = np.array(basis).T
    q, rdiag = np.linalg.qr(b)
    keep = np.abs(np.diag(rdiag)) > 1e-6
    q = q[:, keep]
    proj = np.eye(3 * natom) - q @ q.T
    mw = proj @ mw @ proj
    eig = np.linalg.eigvalsh(mw)
    # The projected rigid-body modes sit at zero; drop them by magnitude.
    eig = sorted(eig, key=abs)[q.shape[1]:]
    # kcal/mol/A^2/amu -> s^-2
    conv = 4184.0 / NA / (1e-20 * AMU)
    freqs = []
    for ev in eig:
        w = math.sqrt(abs(ev) * conv) / (2 * math.pi * C_LIGHT)
        if ev < 0 and w > 50.0:
            return None
        # Soft residual imaginary torsions are folded to small real modes.
        freqs.append(max(w, 1.0))
    return sorted(freqs)


def inertia_abc(coords, masses):
    com = (coords * masses[:, None]).sum(0) / masses.sum()
    r = coords - com
    tensor = np.zeros((3, 3))
    for m, p in zip(masses, r):
        tensor += m * (np.dot(p, p) * np.eye(3) - np.outer(p, p))
    moments = np.sort(np.linalg.eigvalsh(tensor))  # amu A^2
    # B[GHz] = h / (8 pi^2 I)
    factor = H_PLANCK / (8 * math.pi ** 2 * AMU * 1e-20) / 1e9
    abc = [factor / i if i > 1e-6 else 0.0 for i in moments]
    return abc, moments


def thermo(freqs, masses, moments, linear):
    beta = 1.0 / (KB * T298)
    mass_kg = masses.sum() * AMU
    to_hartree = 1.0 / HARTREE_J
    zpve = sum(0.5 * H_PLANCK * C_LIGHT * f for f in freqs) * to_hartree
    e_vib = 0.0
    s_vib = 0.0
    cv_vib = 0.0
    for f in freqs:
        x = H_PLANCK * C_LIGHT * f * beta
        e_vib += H_PLANCK * C_LIGHT * f / math.expm1(x)
        s_vib += x / math.expm1(x) - math.log(-math.expm1(-x))
        cv_vib += x * x * math.exp(x) / math.expm1(x) ** 2
    kt = KB * T298
    single_atom = len(masses) == 1
    e_rot = 0.0 if single_atom else (kt if linear else 1.5 * kt)
    e_trans = 1.5 * kt
    # Thermal energy above the vibrational ground state.
    u_thermal = (e_trans + e_rot + e_vib) * to_hartree
    # Sackur-Tetrode, ideal gas at 1 atm.
    q_trans = (2 * math.pi * mass_kg * kt / H_PLANCK ** 2) ** 1.5 * kt / P_ATM
    s_trans = math.log(q_trans) + 2.5
    if single_atom:
        s_rot = 0.0
    elif linear:
        i_kg = moments[2] * AMU * 1e-20
        s_rot = math.log(8 * math.pi ** 2 * i_kg * kt / H_PLANCK ** 2) + 1.0
    else:
        ip = np.prod(moments) * (AMU * 1e-20) ** 3
        s_rot = math.log(math.sqrt(math.pi * ip) *
                         (8 * math.pi ** 2 * kt / H_PLANCK ** 2) ** 1.5) + 1.5
    s_total = (s_trans + s_rot + s_vib) * KB  # J/K per molecule
    cv = 1.5 + (0.0 if single_atom else (1.0 if linear else 1.5)) + cv_vib
    return {
        "zpve": zpve,
        "u_thermal": u_thermal,
        "h_extra": kt * to_hartree,
        "ts": T298 * s_total * to_hartree,
        "cv": cv * R_CAL,
    }


def electronic(symbols, coords):
    mol = gto.M(atom=list(zip(symbols, map(tuple, coords))), basis="sto-3g",
                verbose=0, unit="Angstrom")
    mf = scf.RHF(mol)
    mf.conv_tol = 1e-9
    mf.max_cycle = 200
    mf.kernel()
    if not mf.converged:
        mf = scf.newton(mf)
        mf.kernel()
        if not mf.converged:
            return None
    nocc = mol.nelectron // 2
    homo = mf.mo_energy[nocc - 1]
    lumo = mf.mo_energy[nocc]
    dm = mf.make_rdm1()
    dip = mf.dip_moment(unit="Debye", verbose=0)
    charges = mf.mulliken_pop(verbose=0)[1]
    masses = mol.atom_mass_list(isotope_avg=True)
    com = (mol.atom_coords() * masses[:, None]).sum(0) / masses.sum()
    with mol.with_common_orig(com):
        r2_ints = mol.intor("int1e_r2")
    r2 = float(np.einsum("ij,ji->", r2_ints, dm))
    return {
        "e_tot": float(mf.e_tot),
        "homo": float(homo),
        "lumo": float(lumo),
        "mu": float(np.linalg.norm(dip)),
        "r2": r2,
        "charges": [float(c) for c in charges],
    }


def fmt(x):
    return repr(float(x))


def write_xyz(path, index, symbols, coords, charges, props, freqs, smiles, inchi):
    scal = [props[k] for k in ("A", "B", "C", "mu", "alpha", "homo", "lumo", "gap",
                               "r2", "zpve", "u0", "u298", "h298", "g298", "cv")]
    lines = [str(len(symbols)),
             "gdb %d\t" % index + "\t".join(fmt(v) for v in scal) + "\t"]
    for s, (x, y, z), q in zip(symbols, coords, charges):
        lines.append("%s\t%s\t%s\t%s\t%s" % (s, fmt(x), fmt(y), fmt(z), fmt(q)))
    lines.append("\t".join("%.4f" % f for f in freqs))
    lines.append("%s\t%s" % (smiles, smiles))
    lines.append("%s\t%s" % (inchi, inchi))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cache_write(cache_dir, key, record):
    record = dict(record)
    record["key"] = key
    name = hashlib.sha256(key.encode("utf-8")).hexdigest() + ".jsonl"
    with open(os.path.join(cache_dir, name), "w") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def descriptors_for(mol, cid, include_xlogp):
    smiles = Chem.MolToSmiles(Chem.RemoveHs(mol))
    desc = {
        "cid": cid,
        "iupac_name": smiles,
        "molecular_formula": rdMolDescriptors.CalcMolFormula(mol),
        "molecular_weight": round(Descriptors.MolWt(mol), 2),
        "hbond_donors": Lipinski.NumHDonors(mol),
        "hbond_acceptors": Lipinski.NumHAcceptors(mol),
        "rotatable_bonds": Lipinski.NumRotatableBonds(mol),
        "tpsa": round(rdMolDescriptors.CalcTPSA(mol), 1),
        "formal_charge": Chem.GetFormalCharge(mol),
        "synonyms": [smiles, Chem.MolToInchiKey(mol)],
        "fetched_at": 1760745600,
        "source_url": "fixture://rdkit/%d" % cid,
    }
    if include_xlogp:
        desc["xlogp"] = round(Crippen.MolLogP(mol), 1)
    return desc


METHANE_RECORD = {
    "cid": 297,
    "iupac_name": "methane",
    "molecular_formula": "CH4",
    "molecular_weight": 16.043,
    "xlogp": 1.1,
    "hbond_donors": 0,
    "hbond_acceptors": 0,
    "rotatable_bonds": 0,
    "tpsa": 0.0,
    "formal_charge": 0,
    "synonyms": ["methane", "Marsh gas", "Methyl hydride", "CH4"],
    "fetched_at": 1760745600,
    "source_url": "https://pubchem.ncbi.nlm.nih.gov/rest/pug/compound/cid/297/property/JSON",
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    xyz_dir = os.path.join(args.out, "xyz")
    cache_dir = os.path.join(args.out, "pubchem_cache")
    os.makedirs(xyz_dir, exist_ok=True)
    os.makedirs(cache_dir, exist_ok=True)

    # Resume: molecules already on disk are reused when the replay reaches them.
    done = {}
    for name in os.listdir(xyz_dir):
        with open(os.path.join(xyz_dir, name)) as f:
            lines = f.read().splitlines()
        done[lines[-2].split("\t")[0]] = int(lines[1].split()[1])

    seen = set()
    queue = ["C"]
    index = 0
    while index < args.count + 1:
        smiles = queue.pop() if queue else random_smiles(rng)
        if smiles is None or smiles in seen:
            continue
        seen.add(smiles)
        mol = embed(smiles, rng.randrange(1 << 30))
        if mol is None:
            continue
        if done.get(smiles) == index + 1:
            index += 1
            inchi = Chem.MolToInchi(mol)
            if index > 1 and rng.random() >= 0.03:
                rng.random()
            continue
        symbols = [a.GetSymbol() for a in mol.GetAtoms()]
        coords = np.array(mol.GetConformer().GetPositions())
        masses = np.array([a.GetMass() for a in mol.GetAtoms()])
        elec = electronic(symbols, coords)
        if elec is None or elec["lumo"] <= elec["homo"]:
            continue
        freqs = harmonic_frequencies(mol, coords, masses)
        if freqs is None:
            continue
        abc, moments = inertia_abc(coords, masses)
        linear = len(symbols) > 1 and moments[0] < 1e-3
        expected_modes = 0 if len(symbols) == 1 else 3 * len(symbols) - (5 if linear else 6)
        if len(freqs) != expected_modes:
            continue
        th = thermo(freqs, masses, moments, linear)
        index += 1
        u0 = elec["e_tot"] + th["zpve"]
        u298 = elec["e_tot"] + th["zpve"] + th["u_thermal"]
        h298 = u298 + th["h_extra"]
        props = {
            "A": abc[0], "B": abc[1], "C": abc[2],
            "mu": elec["mu"],
            "alpha": sum(POLARIZABILITY[s] for s in symbols) * ANG3_TO_BOHR3,
            "homo": elec["homo"], "lumo": elec["lumo"],
            "gap": elec["lumo"] - elec["homo"],
            "r2": elec["r2"], "zpve": th["zpve"],
            "u0": u0, "u298": u298, "h298": h298, "g298": h298 - th["ts"],
            "cv": th["cv"],
        }
        inchi = Chem.MolToInchi(mol)
        write_xyz(os.path.join(xyz_dir, "dsgdb9nsd_%06d.xyz" % index), index, symbols,
                  coords, elec["charges"], props, freqs, smiles, inchi)

        key = "inchi:" + inchi
        if index == 1:
            cache_write(cache_dir, key, {"kind": "cid", "cid": 297})
            cache_write(cache_dir, "cid:297", {"kind": "descriptors",
                                               "descriptors": METHANE_RECORD})
        elif rng.random() < 0.03:
            cache_write(cache_dir, key, {"kind": "miss", "reason": "not-found"})
        else:
            cid = 900000000 + index
            cache_write(cache_dir, key, {"kind": "cid", "cid": cid})
            cache_write(cache_dir, "cid:%d" % cid,
                        {"kind": "descriptors",
                         "descriptors": descriptors_for(mol, cid, rng.random() > 0.05)})
        if index % 50 == 0:
            print("generated", index, flush=True)


if __name__ == "__main__":
    main()
