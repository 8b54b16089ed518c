from celery import shared_task
import logging

from cluster.exceptions import ReplicationError
from cluster.types import ClusterSpec, Trace
from placement.services.policies import PolicyConfig, PolicyKind
from simulation.services.simulator import SimulationOptions, run

logger = logging.getLogger(__name__)


@shared_task(bind=True)
def run_policy_simulation(self, trace_rows, tokens_per_batch, spec_data, policy_data, options_data):
    """
    Replay one policy over a trace; payloads and result are plain JSON.
    """
    try:
        trace = Trace.from_counts(trace_rows, tokens_per_batch=tokens_per_batch,
                                  expert_classes=spec_data['expert_classes'])
        policy = PolicyConfig(
            kind=PolicyKind(policy_data['kind']),
            interval=policy_data.get('interval'),
            inter_rank_only=policy_data.get('inter_rank_only', False),
        )
        report = run(trace, ClusterSpec(**spec_data), policy, SimulationOptions(**options_data))
        return report.to_dict()

    except ReplicationError as e:
        logger.error(f"Simulation task {self.request.id} failed for {policy_data}: {str(e)}")
        raise
