use std::collections::BTreeMap;

use super::{CaptionRequest, Completion, GatewayError, LlmRequest, ModelClient};
use crate::exec::{self, ExecMode};
use crate::manifest::ClipCaption;

/// A request that can be issued through [`execute_batch`].
pub trait BatchRequest: Sync {
    type Output: Send;

    fn request_id(&self) -> String;
    fn run(&self, client: &ModelClient) -> Result<Self::Output, GatewayError>;
}

impl BatchRequest for LlmRequest {
    type Output = Completion;

    fn request_id(&self) -> String {
        self.request_id.clone()
    }

    fn run(&self, client: &ModelClient) -> Result<Completion, GatewayError> {
        client.complete(self)
    }
}

impl BatchRequest for CaptionRequest {
    type Output = ClipCaption;

    fn request_id(&self) -> String {
        CaptionRequest::request_id(self)
    }

    fn run(&self, client: &ModelClient) -> Result<ClipCaption, GatewayError> {
        client.caption(self)
    }
}

/// Issue `requests` with at most `max_in_flight` outstanding at once.
///
/// Failures are reported per request; the map is keyed by request id, so it
/// does not depend on completion order.
pub fn execute_batch<R: BatchRequest>(
    client: &ModelClient,
    requests: &[R],
    max_in_flight: usize,
    mode: ExecMode,
) -> Result<BTreeMap<String, Result<R::Output, GatewayError>>, GatewayError> {
    if max_in_flight == 0 {
        return Err(GatewayError::InvalidRequest("max_in_flight must be at least 1".into()));
    }
    let results = exec::map_bounded(mode, max_in_flight, requests, |r| (r.request_id(), r.run(client)));
    Ok(results.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendEndpoint, MockRegistry, RetryPolicy, Role};
    use std::time::Duration;

    fn client(reg: &MockRegistry, profile: &str) -> ModelClient {
        let ep = BackendEndpoint::mock(Role::Llm, profile);
        ModelClient::new(ep.clone(), reg.transport(&ep).unwrap()).with_retry(RetryPolicy::immediate())
    }

    fn requests(n: usize) -> Vec<LlmRequest> {
        (0..n).map(|i| LlmRequest::new(format!("prompt {i}"), format!("r{i:03}"))).collect()
    }

    #[test]
    fn ten_requests_three_in_flight() {
        let reg = MockRegistry::new().with_latency(Duration::from_millis(5));
        let c = client(&reg, "always-B");
        let out = execute_batch(&c, &requests(10), 3, ExecMode::Parallel).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.values().all(|r| r.as_ref().unwrap().text == "B"));
        assert!(reg.stats().peak_in_flight() <= 3);
        assert_eq!(reg.stats().calls(Role::Llm), 10);
    }

    #[test]
    fn partial_failures_stay_per_request() {
        let reg = MockRegistry::new();
        let c = client(&reg, "poison");
        let mut reqs = requests(5);
        reqs[2].prompt.push_str(" POISON");
        let out = execute_batch(&c, &reqs, 2, ExecMode::Parallel).unwrap();
        assert_eq!(out.values().filter(|r| r.is_ok()).count(), 4);
        assert!(out["r002"].is_err());
    }

    #[test]
    fn results_do_not_depend_on_order_or_mode() {
        let reg = MockRegistry::new();
        let c = client(&reg, "echo");
        let reqs = requests(20);
        let a = execute_batch(&c, &reqs, 4, ExecMode::Parallel).unwrap();
        let mut rev = reqs.clone();
        rev.reverse();
        let b = execute_batch(&c, &rev, 7, ExecMode::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_width_is_rejected() {
        let reg = MockRegistry::new();
        let c = client(&reg, "always-B");
        assert!(execute_batch(&c, &requests(1), 0, ExecMode::Parallel).is_err());
    }
}
