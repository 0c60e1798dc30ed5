//! Majority acknowledgment with injected replica faults.

use dualstore::csd::{Csd, DeviceConfig};
use dualstore::store::{ChunkStore, Fault, RedoRecord, StoreConfig, StoreError};
use dualstore::PageId;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut s = ChunkStore::new(Csd::new(DeviceConfig::default())?, StoreConfig::default())?;
    let rec = |lsn| RedoRecord::patch(lsn, PageId(1), 0, vec![lsn as u8; 64]);

    s.replicas_mut().set_fault(0, Fault::Stalled);
    println!("one replica stalled: durable lsn {}", s.write_redo(&[rec(1)])?);

    s.replicas_mut().set_fault(1, Fault::Stalled);
    match s.write_redo(&[rec(2)]) {
        Err(StoreError::ReplicationLost { acks, needed }) => println!("two stalled: not acknowledged ({acks}/{needed})"),
        other => panic!("unexpected {other:?}"),
    }
    println!("durable lsn still {}", s.lsn_state().durable);

    s.replicas_mut().set_fault(0, Fault::Healthy);
    s.replicas_mut().set_fault(1, Fault::Drop(0.3));
    let mut ok = 0;
    for lsn in 2..40 {
        if s.write_redo(&[rec(s.lsn_state().durable + 1)]).is_ok() {
            ok += 1;
        } else {
            println!("lsn {lsn}: quorum lost, retried later");
        }
    }
    s.replicas_mut().set_fault(1, Fault::Healthy);
    let caught = s.replicas_mut().catch_up();
    println!("{ok} writes acknowledged; {caught} replica(s) caught up; applied {:?}", s.replicas().applied());
    println!("{:?}", s.replicas().stats());
    Ok(())
}
