import os
from collections import OrderedDict

import numpy as np

from artifacts import write_json
from cliCommands.CliCommand import CliCommand
from mrCore.config import world_spec
from mrCore.envsim import build_world, gen_mixed_data
from mrCore.stitchtoy import build_stitch_toy
from mrCore.trajectory import save_dataset


class CliCommandGenData(CliCommand):
    """
    Collects the behaviour dataset in the simulated world.

    example:
        misret gen-data --config configs/default.json
    """

    # List of all command aliases
    aliases = ['gen-data', 'gen_data']

    # Dictionary of types from the command line, needs to be ordered
    arg_names = OrderedDict()

    # Dictionary of types of options like --option-name value, needs to be ordered
    option_types = OrderedDict([
        ('toy', bool),
        ('force', bool)
    ])

    # array of mandatory arguments for current command
    required = []

    # structured help for current command, args needs to be ordered
    help = {
        'main': "Generates the mixed-quality behaviour dataset and its provenance sidecar.",
        'args': OrderedDict([
            ('toy', 'Write the two-trajectory stitching toy instead.'),
            ('force', 'Overwrite an existing dataset.')
        ]),
        'examples': ['misret gen-data --set world.episodes=200 --force']
    }

    def execute(self, args, unnamed_args):
        """

        :param args:
        :param unnamed_args:
        :return: Summary dict of the written dataset.
        """

        cfg = self.app.config
        path = cfg["paths"]["dataset"]
        sidecar = self.provenance_path(path)
        for p in (path, sidecar):
            if os.path.exists(p) and not args.get('force', False):
                self.raise_command_error("%s exists, use --force to overwrite it." % p)
        self.ensure_parent(path)

        if args.get('toy', False):
            ds, _ = build_stitch_toy()
            spec = None
            mix = None
        else:
            spec = world_spec(cfg)
            world = build_world(spec)
            mix = cfg["world"]["eps_mix"]
            ds = gen_mixed_data(world, mix, cfg["world"]["episodes"], cfg["seed"],
                                n_bins=cfg["world"]["return_bins"], gamma=cfg["world"]["gamma"])

        save_dataset(ds, path)
        write_json(sidecar, {
            "dataset": path,
            "toy": bool(args.get('toy', False)),
            "world_spec": spec,
            "eps_mix": mix,
            "seed": cfg["seed"],
            "config": cfg,
            "config_digest": self.app.digest
        })

        returns = np.array([tr.episode_return for tr in ds.trajectories])
        summary = {
            "path": path,
            "trajectories": len(ds),
            "steps": int(sum(len(tr) for tr in ds.trajectories)),
            "return_mean": float(returns.mean()),
            "return_max": float(returns.max())
        }
        print("Wrote %d trajectories (%d steps) to %s, mean return %.3f, max %.3f"
              % (summary["trajectories"], summary["steps"], path, summary["return_mean"], summary["return_max"]))
        return summary
