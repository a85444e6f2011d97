"""Desk-scale digital twin stack for underwater ROVs.

Subpackages cover the simulated vehicle (envsim), simulated visual SLAM
(perception), cloud densification and occupancy octrees (mapping), RRT/RRT*
planning (planner), the topic pub-sub bridge (bridge, bag), the mirrored
twin state server (twin_server), the physical-side node (sim_node), and the
command-line front end (cli).
"""

__version__ = "0.1.0"
