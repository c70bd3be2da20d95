"""Regenerate the fixture grippers and meshes (run once; outputs are checked in).

    python tests/fixtures/build_fixtures.py
"""

import os

import numpy as np

from morphgrasp.mesh_geometry import TriMesh, box_mesh, cylinder_mesh, save_obj, save_stl, uv_sphere_mesh

HERE = os.path.dirname(os.path.abspath(__file__))


def save_ascii_stl(mesh: TriMesh, path: str) -> None:
    tri = mesh.vertices[mesh.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    lines = ["solid fixture"]
    for n, t in zip(normals, tri):
        lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
        lines.append("    outer loop")
        lines += [f"      vertex {v[0]:.9e} {v[1]:.9e} {v[2]:.9e}" for v in t]
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append("endsolid fixture")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def fingertip_mesh() -> TriMesh:
    """Ellipsoidal pad, 24 x 24 x 40 mm, base at z = 0."""
    s = uv_sphere_mesh(1.0, 8, 16)
    v = s.vertices * np.array([0.012, 0.012, 0.02]) + np.array([0.0, 0.0, 0.02])
    return TriMesh(v, s.faces)


def write_barrett(root: str) -> None:
    mdir = os.path.join(root, "meshes")
    os.makedirs(mdir, exist_ok=True)
    save_obj(cylinder_mesh(0.045, 0.08, 24), os.path.join(mdir, "palm_280.obj"))
    save_obj(box_mesh((0.05, 0.025, 0.02), (-0.0125, -0.0125, -0.01)), os.path.join(mdir, "link1.obj"))
    save_obj(box_mesh((0.07, 0.02, 0.02), (0.0, -0.01, -0.01)), os.path.join(mdir, "link2.obj"))
    save_obj(box_mesh((0.055, 0.018, 0.018), (0.0, -0.009, -0.009)), os.path.join(mdir, "link3.obj"))
    save_stl(fingertip_mesh(), os.path.join(mdir, "fingertip.stl"))
    pkg = "package://barrett_hand_description/meshes"
    fingers = []
    for f, (x, y, spread) in enumerate([(0.025, 0.0, True), (-0.025, 0.0, True), (0.0, 0.05, False)], start=1):
        body = []
        if spread:
            body += [
                f'  <link name="finger_{f}_prox_link">',
                f'    <visual><geometry><mesh filename="{pkg}/link1.obj"/></geometry></visual>',
                f'    <collision><geometry><mesh filename="{pkg}/link1.obj"/></geometry></collision>',
                "  </link>",
                f'  <joint name="j{f}1_joint" type="revolute">',
                '    <parent link="bh_base_link"/>',
                f'    <child link="finger_{f}_prox_link"/>',
                f'    <origin xyz="{x} {y} 0.0754" rpy="0 0 {1.5708 if f == 1 else -1.5708}"/>',
                '    <axis xyz="0 0 -1"/>',
                '    <limit lower="0" upper="3.1416" effort="5" velocity="2"/>',
                "  </joint>",
            ]
            med_parent, med_origin = f"finger_{f}_prox_link", 'xyz="0.05 0 0.0339" rpy="1.5708 0 0"'
        else:
            med_parent, med_origin = "bh_base_link", f'xyz="{x} {y} 0.0754" rpy="1.5708 0 -1.5708"'
        body += [
            f'  <link name="finger_{f}_med_link">',
            f'    <visual><origin xyz="0 0 0" rpy="0 0 0"/><geometry><mesh filename="{pkg}/link2.obj"/></geometry></visual>',
            "  </link>",
            f'  <joint name="j{f}2_joint" type="revolute">',
            f'    <parent link="{med_parent}"/>',
            f'    <child link="finger_{f}_med_link"/>',
            f"    <origin {med_origin}/>",
            '    <axis xyz="0 0 1"/>',
            '    <limit lower="0" upper="2.44" effort="5" velocity="2"/>',
            "  </joint>",
            f'  <link name="finger_{f}_dist_link">',
            f'    <visual><geometry><mesh filename="{pkg}/link3.obj"/></geometry></visual>',
            "  </link>",
            f'  <joint name="j{f}3_joint" type="revolute">',
            f'    <parent link="finger_{f}_med_link"/>',
            f'    <child link="finger_{f}_dist_link"/>',
            '    <origin xyz="0.06994 0.003 0" rpy="0 0 0.7854"/>',
            '    <axis xyz="0 0 1"/>',
            '    <limit lower="0" upper="0.84" effort="5" velocity="2"/>',
            f'    <mimic joint="j{f}2_joint" multiplier="0.3442" offset="0"/>',
            "  </joint>",
        ]
        fingers += body
    tip = [
        '  <link name="finger_3_tip_link">',
        f'    <visual><origin xyz="0.055 0 0" rpy="0 1.5708 0"/><geometry><mesh filename="{pkg}/fingertip.stl" scale="1 1 1"/></geometry></visual>',
        "  </link>",
        '  <joint name="finger_3_tip_joint" type="fixed">',
        '    <parent link="finger_3_dist_link"/>',
        '    <child link="finger_3_tip_link"/>',
        "  </joint>",
    ]
    text = "\n".join([
        '<?xml version="1.0"?>',
        "<!-- Barrett-style three-finger hand: two spreading fingers, one fixed finger -->",
        '<robot name="barrett_style">',
        '  <link name="hand_mount"/>',
        '  <link name="bh_base_link">',
        '    <inertial><mass value="0.5"/><inertia ixx="1e-3" ixy="0" ixz="0" iyy="1e-3" iyz="0" izz="1e-3"/></inertial>',
        f'    <visual><geometry><mesh filename="{pkg}/palm_280.obj"/></geometry></visual>',
        "  </link>",
        '  <joint name="mount_joint" type="fixed">',
        '    <parent link="hand_mount"/>',
        '    <child link="bh_base_link"/>',
        '    <origin xyz="0 0 0" rpy="0 0 0"/>',
        "  </joint>",
        "  <!-- <link name=\"commented_out_link\"/> -->",
        *fingers,
        *tip,
        '  <transmission name="j12_trans">',
        "    <type>transmission_interface/SimpleTransmission</type>",
        '    <joint name="j12_joint"><hardwareInterface>EffortJointInterface</hardwareInterface></joint>',
        '    <actuator name="j12_motor"><mechanicalReduction>1</mechanicalReduction></actuator>',
        "  </transmission>",
        '  <gazebo reference="bh_base_link"><material>Gazebo/Grey</material></gazebo>',
        "</robot>",
    ])
    with open(os.path.join(root, "barrett_style.urdf"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def write_allegro(root: str) -> None:
    mdir = os.path.join(root, "meshes")
    os.makedirs(mdir, exist_ok=True)
    # palm in millimetres, scaled in the URDF
    palm = box_mesh((95.0, 40.0, 110.0), (-47.5, -20.0, -95.0))
    save_stl(palm, os.path.join(mdir, "base_link.stl"))
    save_stl(box_mesh((0.0196, 0.0196, 0.0164), (-0.0098, -0.0098, 0.0)), os.path.join(mdir, "link_0.0.stl"))
    save_stl(box_mesh((0.0196, 0.0196, 0.054), (-0.0098, -0.0098, 0.0)), os.path.join(mdir, "link_1.0.stl"))
    save_ascii_stl(box_mesh((0.0196, 0.0196, 0.0384), (-0.0098, -0.0098, 0.0)), os.path.join(mdir, "link_2.0.stl"))
    save_stl(box_mesh((0.0196, 0.0196, 0.0267), (-0.0098, -0.0098, 0.0)), os.path.join(mdir, "link_3.0.stl"))
    save_stl(fingertip_mesh(), os.path.join(mdir, "link_3.0_tip.stl"))
    pkg = "package://allegro_hand_description/meshes"
    bases = [("0.0 0.0435 -0.001542", "-0.0872665 0 0"), ("0 0 0.0007", "0 0 0"),
             ("0 -0.0435 -0.001542", "0.0872665 0 0"), ("-0.0182 0.019333 -0.045987", "0 -1.65806 -1.5708")]
    lengths = ["0 0 0.0164", "0 0 0.054", "0 0 0.0384"]
    tip_offset = "0 0 0.0267"
    limits = [(-0.47, 0.47), (-0.196, 1.61), (-0.174, 1.709), (-0.227, 1.618)]
    axes = ["0 0 1", "0 1 0", "0 1 0", "0 1 0"]
    lines = []
    for f in range(4):
        parent = "base_link"
        for s in range(4):
            idx = 4 * f + s
            link = f"link_{idx}.0"
            lines += [f'  <link name="{link}">',
                      f'    <visual><geometry><mesh filename="{pkg}/link_{s}.0.stl"/></geometry></visual>',
                      "  </link>"]
            xyz, rpy = (bases[f] if s == 0 else (lengths[s - 1], "0 0 0"))
            lo, hi = limits[s]
            lines += [f'  <joint name="joint_{idx}.0" type="revolute">',
                      f'    <axis xyz="{axes[s]}"/>',
                      f'    <limit effort="15" lower="{lo}" upper="{hi}" velocity="7"/>',
                      f'    <parent link="{parent}"/>',
                      f'    <child link="{link}"/>',
                      f'    <origin rpy="{rpy}" xyz="{xyz}"/>',
                      '    <dynamics damping="3" friction="10"/>',
                      "  </joint>"]
            parent = link
        tip = f"link_{4 * f + 3}.0_tip"
        lines += [f'  <link name="{tip}">',
                  f'    <visual><geometry><mesh filename="{pkg}/link_3.0_tip.stl"/></geometry></visual>',
                  "  </link>",
                  f'  <joint name="joint_{4 * f + 3}.0_tip" type="fixed">',
                  f'    <parent link="{parent}"/>',
                  f'    <child link="{tip}"/>',
                  f'    <origin rpy="0 0 0" xyz="{tip_offset}"/>',
                  "  </joint>"]
    text = "\n".join([
        '<?xml version="1.0" ?>',
        '<robot name="allegro_style">',
        "  <!-- palm; mesh is authored in millimetres -->",
        '  <link name="base_link">',
        f'    <visual><origin rpy="0 0 0" xyz="0 0 0"/><geometry><mesh filename="{pkg}/base_link.stl" scale="0.001 0.001 0.001"/></geometry></visual>',
        f'    <collision><geometry><box size="0.0408 0.1130 0.095"/></geometry></collision>',
        "  </link>",
        *lines,
        "</robot>",
    ])
    with open(os.path.join(root, "allegro_style.urdf"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def write_planar(root: str) -> None:
    """Two-link planar arm on the z axis, for closed-form FK and golden morphology checks."""
    mdir = os.path.join(root, "meshes")
    os.makedirs(mdir, exist_ok=True)
    save_obj(box_mesh((0.04, 0.04, 0.02), (-0.02, -0.02, -0.02)), os.path.join(mdir, "base.obj"))
    save_obj(box_mesh((0.1, 0.02, 0.02), (0.0, -0.01, -0.01)), os.path.join(mdir, "upper.obj"))
    save_obj(box_mesh((0.07, 0.02, 0.02), (0.0, -0.01, -0.01)), os.path.join(mdir, "fore.obj"))
    text = """<robot name="planar_two_link">
  <link name="base"><visual><geometry><mesh filename="base.obj"/></geometry></visual></link>
  <link name="upper"><visual><geometry><mesh filename="upper.obj"/></geometry></visual></link>
  <link name="fore"><visual><geometry><mesh filename="fore.obj"/></geometry></visual></link>
  <joint name="shoulder" type="revolute">
    <parent link="base"/><child link="upper"/>
    <origin xyz="0 0 0"/>
    <axis xyz="0 0 1"/>
    <limit lower="-3.14159" upper="3.14159"/>
  </joint>
  <joint name="elbow" type="revolute">
    <parent link="upper"/><child link="fore"/>
    <origin xyz="0.1 0 0"/>
    <axis xyz="0 0 1"/>
    <limit lower="-3.14159" upper="3.14159"/>
  </joint>
</robot>
"""
    with open(os.path.join(root, "planar.urdf"), "w", encoding="utf-8") as fh:
        fh.write(text)


if __name__ == "__main__":
    write_barrett(os.path.join(HERE, "barrett"))
    write_allegro(os.path.join(HERE, "allegro"))
    write_planar(os.path.join(HERE, "planar"))
    save_stl(fingertip_mesh(), os.path.join(HERE, "fingertip.stl"))
    save_obj(fingertip_mesh(), os.path.join(HERE, "fingertip.obj"))
