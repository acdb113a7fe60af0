//! DNS-SD service records for local-link announcements.
//!
//! Each served capability becomes one `_tip._udp.local` service instance:
//! a PTR from the service type to the instance name, an SRV pointing at the
//! node's host and port, and a TXT record with `cap`, `schema`, `ver` and
//! `sec` pairs. On the simulated bus these travel as CBOR maps.

use ciborium::value::Value;

use crate::cbor::{CborError, MapBuilder, MapView};
use crate::model::{Capability, NodeRecord};

pub const SERVICE_TYPE: &str = "_tip._udp.local";
pub const MDNS_PORT: u16 = 5353;
pub const MDNS_IPV4: &str = "224.0.0.251";
pub const MDNS_IPV6: &str = "ff02::fb";
pub const COAP_PORT: u16 = 5683;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceInstance {
    /// PTR owner: the service type.
    pub service: String,
    /// PTR target / SRV+TXT owner.
    pub instance: String,
    pub host: String,
    pub port: u16,
    pub txt: Vec<(String, String)>,
}

fn port_of(address: &str) -> u16 {
    address
        .rsplit_once(':')
        .and_then(|(_, p)| p.parse().ok())
        .unwrap_or(COAP_PORT)
}

impl ServiceInstance {
    pub fn for_capability(node: &NodeRecord, cap: &Capability) -> Self {
        let prefix = hex::encode(&node.node_id.0[..8]);
        Self {
            service: SERVICE_TYPE.into(),
            instance: format!("{prefix}.{SERVICE_TYPE}"),
            host: format!("{prefix}.local"),
            port: node.primary_address().map(port_of).unwrap_or(COAP_PORT),
            txt: vec![
                ("cap".into(), cap.id.clone()),
                ("schema".into(), cap.schema.name().into()),
                ("ver".into(), cap.version.clone()),
                ("sec".into(), "1".into()),
            ],
        }
    }

    pub fn txt_value(&self, key: &str) -> Option<&str> {
        self.txt
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn capability_id(&self) -> Option<&str> {
        self.txt_value("cap")
    }

    /// TXT record strings in `key=value` form.
    pub fn txt_strings(&self) -> Vec<String> {
        self.txt.iter().map(|(k, v)| format!("{k}={v}")).collect()
    }

    pub fn to_cbor(&self) -> Value {
        MapBuilder::new()
            .put(0, self.service.as_str())
            .put(1, self.instance.as_str())
            .put(2, self.host.as_str())
            .put(3, self.port as u64)
            .put(
                4,
                Value::Map(
                    self.txt
                        .iter()
                        .map(|(k, v)| (Value::Text(k.clone()), Value::Text(v.clone())))
                        .collect(),
                ),
            )
            .build()
    }

    pub fn from_cbor(v: &Value) -> Result<Self, CborError> {
        let m = MapView::new(v)?;
        let txt = match m.required(4)? {
            Value::Map(entries) => entries
                .iter()
                .map(|(k, v)| match (k, v) {
                    (Value::Text(k), Value::Text(v)) => Ok((k.clone(), v.clone())),
                    _ => Err(CborError::Schema("TXT entries must be text".into())),
                })
                .collect::<Result<_, _>>()?,
            _ => return Err(CborError::Schema("TXT must be a map".into())),
        };
        Ok(Self {
            service: m.text(0)?.to_owned(),
            instance: m.text(1)?.to_owned(),
            host: m.text(2)?.to_owned(),
            port: u16::try_from(m.uint(3)?)
                .map_err(|_| CborError::Schema("port out of range".into()))?,
            txt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DataSchema;

    #[test]
    fn record_shape() {
        let mut node = NodeRecord::new([1; 32], vec!["127.0.0.1:7000".into()]);
        let cap = Capability::new("machine:fluid:fill", DataSchema::U32);
        node.capabilities.push(cap.clone());
        let s = ServiceInstance::for_capability(&node, &cap);
        assert_eq!(s.service, "_tip._udp.local");
        assert!(s.instance.ends_with("._tip._udp.local"));
        assert_eq!(s.port, 7000);
        assert_eq!(
            s.txt_strings(),
            vec!["cap=machine:fluid:fill", "schema=u32", "ver=1.0.0", "sec=1"]
        );
        assert_eq!(ServiceInstance::from_cbor(&s.to_cbor()).unwrap(), s);
    }
}
