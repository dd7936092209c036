from collections import OrderedDict
from dataclasses import replace

from artifacts import write_json
from cliCommands.CliCommand import CliCommand
from mrCore.checkpoint import CheckpointError
from mrCore.config import world_spec, search_config
from mrCore.envsim import build_world
from mrCore.evaluation import rollout_eval
from mrCore.model import load_model


class CliCommandEval(CliCommand):
    """
    Rolls the trained policy out in the simulator and reports
    R_cumu, R_avg and Length.

    example:
        misret eval --checkpoint out/model.ckpt
    """

    # List of all command aliases
    aliases = ['eval']

    # Dictionary of types from the command line, needs to be ordered
    arg_names = OrderedDict()

    # Dictionary of types of options like --option-name value, needs to be ordered
    option_types = OrderedDict([
        ('checkpoint', str),
        ('episodes', int),
        ('workers', int)
    ])

    # array of mandatory arguments for current command
    required = []

    # structured help for current command, args needs to be ordered
    help = {
        'main': "Evaluates a checkpoint over independent simulator sessions and writes the JSON report.",
        'args': OrderedDict([
            ('checkpoint', 'Checkpoint to evaluate, overrides paths.checkpoint.'),
            ('episodes', 'Episodes per environment, overrides search.episodes_per_env.'),
            ('workers', 'Rollout worker processes, overrides search.workers.')
        ]),
        'examples': ['misret eval --episodes 2',
                     'misret eval --sweep search.delta=2,4,6,8']
    }

    sweepable = True
    sweep_outputs = ('report',)
    sweep_inputs = ('checkpoint',)

    def execute(self, args, unnamed_args):
        """

        :param args:
        :param unnamed_args:
        :return: Evaluation report.
        """

        if 'episodes' in args:
            if args['episodes'] < 1:
                self.raise_command_error("--episodes must be >= 1, got %d." % args['episodes'])
            self.app.set_option("search.episodes_per_env", args['episodes'])
        if 'checkpoint' in args:
            self.app.set_option("paths.checkpoint", args['checkpoint'])
        if 'workers' in args:
            self.app.set_option("search.workers", args['workers'])
        self.app.propagate_options()

        cfg = self.app.config
        s = cfg["search"]
        path = cfg["paths"]["checkpoint"]
        model = load_model(path)

        spec = world_spec(cfg)
        if model.cfg.state_dim != spec.state_dim or model.cfg.n_items != spec.n_items:
            raise CheckpointError("checkpoint %s was trained for state_dim %d and %d items, "
                                  "the configured world has state_dim %d and %d items"
                                  % (path, model.cfg.state_dim, model.cfg.n_items, spec.state_dim, spec.n_items))
        world = build_world(spec)

        scfg = search_config(cfg)
        scfg = replace(scfg, T_max=min(scfg.T_max, model.cfg.T_max),
                       max_head=bool(model.extra.get("max_head", scfg.max_head)))

        with self.app.make_pool(s["workers"]) as pool:
            report = rollout_eval(model, world, s["n_envs"], s["episodes_per_env"], scfg, cfg["seed"], pool=pool)

        report["config"] = cfg
        report["config_digest"] = self.app.digest
        report["checkpoint"] = path
        report["variant"] = model.extra.get("variant")
        report["search"] = scfg.to_dict()
        self.ensure_parent(cfg["paths"]["report"])
        write_json(cfg["paths"]["report"], report)

        print("R_cumu %.3f +- %.3f   R_avg %.3f +- %.3f   Length %.2f   (%d episodes)"
              % (report["R_cumu"]["mean"], report["R_cumu"]["std"], report["R_avg"]["mean"],
                 report["R_avg"]["std"], report["Length"]["mean"], report["episodes"]))
        return report

    def sweep_row(self, result):
        return {
            "R_cumu": result["R_cumu"]["mean"],
            "R_cumu_std": result["R_cumu"]["std"],
            "Length": result["Length"]["mean"],
            "Length_std": result["Length"]["std"]
        }
