//! CSV output with a fixed number format: '.' decimal, 12 significant digits,
//! no locale.

use std::io::Write;

use crate::domain::{DomainKind, ValueTable};
use crate::error::Result;
use crate::nagent::AgentConfig;
use crate::policy::Policy;

/// `x` to 12 significant digits, fixed notation for moderate magnitudes and
/// exponent notation otherwise. Trailing zeros are dropped.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.11e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim(mant.to_string()), exp)
    }
}

fn trim(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" {
        "0".into()
    } else {
        t.to_string()
    }
}

/// One row per admissible pair: `state,node,v1..vd,value`, states 1-based.
pub fn write_value_table(table: &ValueTable, out: impl Write) -> Result<()> {
    let dom = table.domain();
    let d = dom.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["state".to_string(), "node".to_string()];
    header.extend((1..=d).map(|i| format!("v{i}")));
    if let DomainKind::Agents(_) = dom.kind() {
        header.extend((1..=d).map(|i| format!("n{i}")));
    }
    header.push("value".into());
    w.write_record(&header)?;
    for (node, x) in dom.pairs() {
        let mut rec = vec![(x + 1).to_string(), node.to_string()];
        rec.extend(dom.node(node).weights().iter().map(|&p| fmt_num(p)));
        if let DomainKind::Agents(_) = dom.kind() {
            rec.extend(dom.counts(node).iter().map(|c| c.to_string()));
        }
        rec.push(fmt_num(table.get(node, x)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean action per admissible pair: `state,node,v1..vd,mean_action,support`.
pub fn write_policy_summary(policy: &Policy, out: impl Write) -> Result<()> {
    let dom = policy.domain();
    let d = dom.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["state".to_string(), "node".to_string()];
    header.extend((1..=d).map(|i| format!("v{i}")));
    header.push("mean_action".into());
    header.push("support".into());
    w.write_record(&header)?;
    for (node, x) in dom.pairs() {
        let c = policy.control(node, x);
        let mut rec = vec![(x + 1).to_string(), node.to_string()];
        rec.extend(dom.node(node).weights().iter().map(|&p| fmt_num(p)));
        rec.push(fmt_num(c.mean(policy.actions())));
        rec.push(c.entries().len().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `t,n1..nd,v1..vd` per configuration.
pub fn write_trajectory(path: &[AgentConfig], out: impl Write) -> Result<()> {
    let d = path.first().map_or(0, |c| c.dim());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("n{i}")));
    header.extend((1..=d).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for (t, c) in path.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(c.counts().iter().map(|n| n.to_string()));
        rec.extend(c.empirical().weights().iter().map(|&p| fmt_num(p)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header and rows of already formatted fields.
pub fn write_rows(header: &[&str], rows: &[Vec<String>], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
