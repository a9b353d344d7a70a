//! Node topology fixtures.
//!
//! A topology file names the application nodes of a payload and what each
//! publishes, subscribes to, and serves, plus whether the node is flagged
//! protected (isolate at all costs). The format reuses the policy file's
//! line conventions: `[node <name>]` sections with `key = value` lines.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyNode {
    pub name: String,
    pub publishes: Vec<String>,
    pub subscribes: Vec<String>,
    pub services: Vec<String>,
    pub protected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Topology {
    pub nodes: Vec<TopologyNode>,
}

impl Topology {
    pub fn protected_nodes(&self) -> Vec<&TopologyNode> {
        self.nodes.iter().filter(|n| n.protected).collect()
    }
}

/// Parse a topology file.
pub fn parse_topology(text: &str) -> Result<Topology, String> {
    let mut topology = Topology::default();
    let mut current: Option<TopologyNode> = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| format!("line {lineno}: unterminated section"))?;
            let name = header
                .strip_prefix("node ")
                .ok_or_else(|| format!("line {lineno}: expected `[node <name>]`"))?
                .trim();
            if name.is_empty() {
                return Err(format!("line {lineno}: empty node name"));
            }
            if let Some(node) = current.take() {
                topology.nodes.push(node);
            }
            current = Some(TopologyNode {
                name: name.to_string(),
                publishes: Vec::new(),
                subscribes: Vec::new(),
                services: Vec::new(),
                protected: false,
            });
            continue;
        }
        let node = current
            .as_mut()
            .ok_or_else(|| format!("line {lineno}: key outside any [node] section"))?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {lineno}: expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let list = || {
            value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect::<Vec<_>>()
        };
        match key {
            "publishes" => node.publishes = list(),
            "subscribes" => node.subscribes = list(),
            "services" => node.services = list(),
            "protected" => {
                node.protected = match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(format!("line {lineno}: expected true|false, got `{other}`")),
                }
            }
            other => return Err(format!("line {lineno}: unknown key `{other}`")),
        }
    }
    if let Some(node) = current.take() {
        topology.nodes.push(node);
    }
    if topology.nodes.is_empty() {
        return Err("topology has no nodes".to_string());
    }
    let mut names: Vec<&str> = topology.nodes.iter().map(|n| n.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != topology.nodes.len() {
        return Err("duplicate node names".to_string());
    }
    Ok(topology)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_protected_pair() {
        let text = "\
# two-node layout
[node obc]
publishes = telemetry
services = cmd

[node payload]
subscribes = telemetry
protected = true
";
        let topo = parse_topology(text).unwrap();
        assert_eq!(topo.nodes.len(), 2);
        assert_eq!(topo.nodes[0].name, "obc");
        assert_eq!(topo.nodes[0].services, vec!["cmd".to_string()]);
        assert!(!topo.nodes[0].protected);
        assert!(topo.nodes[1].protected);
        assert_eq!(topo.protected_nodes().len(), 1);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse_topology("").is_err());
        assert!(parse_topology("[node a]\n[node a]\n").is_err());
        assert!(parse_topology("key = value\n").is_err());
        assert!(parse_topology("[node a]\nweird = x\n").is_err());
    }
}
