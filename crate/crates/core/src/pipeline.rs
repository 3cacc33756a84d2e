//! Container images built and vetted outside the enclave, approved, then
//! deployed onto enclave VMs. Updates replace instances; nothing is patched in
//! place.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use strum::Display;

use crate::broker::Broker;
use crate::directory::PlatformRole;
use crate::enclave::{Source, VmState};
use crate::error::{BrokerError, Result};
use crate::ledger::{detail, Action};
use crate::types::{Digest, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase")]
pub enum ImageState {
    Drafted,
    Vetted,
    Approved,
    Deployed,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerImage {
    pub id: String,
    /// SHA-256 of the payload token.
    pub digest: Digest,
    pub state: ImageState,
    pub builder: String,
    pub vetter: Option<String>,
    pub approver: Option<String>,
    pub project: String,
    pub payload: String,
    pub report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployedInstance {
    pub id: String,
    pub image: String,
    pub vm: String,
    pub deployed_at: Timestamp,
    pub digest_verified: bool,
    pub retired: bool,
}

/// Manifest row for audit export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageManifestRow {
    pub image_id: String,
    pub digest: Digest,
    pub state: ImageState,
    pub builder: String,
    pub vetter: Option<String>,
    pub approver: Option<String>,
    pub project: String,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Pipeline {
    pub(crate) images: BTreeMap<String, ContainerImage>,
    pub(crate) instances: BTreeMap<String, DeployedInstance>,
}

impl Broker {
    pub fn image(&self, id: &str) -> Result<&ContainerImage> {
        self.pipeline.images.get(id).ok_or_else(|| BrokerError::UnknownImage(id.to_owned()))
    }

    pub fn images(&self) -> impl Iterator<Item = &ContainerImage> {
        self.pipeline.images.values()
    }

    pub fn instance(&self, id: &str) -> Result<&DeployedInstance> {
        self.pipeline.instances.get(id).ok_or_else(|| BrokerError::UnknownInstance(id.to_owned()))
    }

    pub fn instances(&self) -> impl Iterator<Item = &DeployedInstance> {
        self.pipeline.instances.values()
    }

    pub fn image_manifest(&self) -> Vec<ImageManifestRow> {
        self.images()
            .map(|i| ImageManifestRow {
                image_id: i.id.clone(),
                digest: i.digest,
                state: i.state,
                builder: i.builder.clone(),
                vetter: i.vetter.clone(),
                approver: i.approver.clone(),
                project: i.project.clone(),
            })
            .collect()
    }

    fn source_inside(&self, from: &Source) -> Result<bool> {
        Ok(match from {
            Source::Zone(z) => {
                if !self.enclave.topology.has_zone(*z) {
                    return Err(BrokerError::UnknownEndpoint(z.to_string()));
                }
                z.is_enclave()
            }
            Source::Vm(id) => self.enclave.vm(id).map_err(|_| BrokerError::UnknownEndpoint(id.clone()))?.zone.is_enclave(),
            Source::Session(id) => {
                self.session(id)?;
                true
            }
        })
    }

    pub fn submit_image(&mut self, builder: &str, project: &str, payload: &str, from: &Source) -> Result<ContainerImage> {
        self.project_ref(project)?;
        self.directory.active_user(builder)?;
        if self.source_inside(from)? {
            return Err(BrokerError::InsideEnclaveSubmission);
        }
        if payload.is_empty() {
            return Err(BrokerError::InvalidSpec("empty image payload".into()));
        }
        let id = self.ids.next("img", 4);
        let image = ContainerImage {
            id: id.clone(),
            digest: Digest::of(payload.as_bytes()),
            state: ImageState::Drafted,
            builder: builder.to_owned(),
            vetter: None,
            approver: None,
            project: project.to_owned(),
            payload: payload.to_owned(),
            report: None,
        };
        self.pipeline.images.insert(id.clone(), image.clone());
        self.log(builder, Action::ImageSubmit, &id, detail([("project", project.to_owned()), ("digest", image.digest.to_hex())]));
        Ok(image)
    }

    fn expect_state(&self, image: &str, want: ImageState) -> Result<&ContainerImage> {
        let img = self.image(image)?;
        if img.state != want {
            return Err(BrokerError::WrongState { image: image.to_owned(), state: img.state.to_string() });
        }
        Ok(img)
    }

    pub fn vet_image(&mut self, vetter: &str, image: &str, report: &str) -> Result<ContainerImage> {
        let project = self.expect_state(image, ImageState::Drafted)?.project.clone();
        if !self.directory.has_role(vetter, PlatformRole::Vetter) {
            return Err(BrokerError::unauthorized(vetter, "vet images"));
        }
        if report.trim().is_empty() {
            return Err(BrokerError::EmptyReport);
        }
        let img = self.pipeline.images.get_mut(image).expect("checked above");
        img.state = ImageState::Vetted;
        img.vetter = Some(vetter.to_owned());
        img.report = Some(report.to_owned());
        let out = img.clone();
        self.log(vetter, Action::ImageVet, image, detail([("project", project), ("report", report.to_owned())]));
        Ok(out)
    }

    pub fn approve_image(&mut self, approver: &str, image: &str) -> Result<ContainerImage> {
        let project = self.expect_state(image, ImageState::Vetted)?.project.clone();
        let prj = self.project_ref(&project)?;
        let allowed = self.directory.is_active(approver) && (prj.stewards.contains(approver) || prj.approvers.contains(approver));
        if !allowed {
            return Err(BrokerError::unauthorized(approver, format!("approve images for {project}")));
        }
        let img = self.pipeline.images.get_mut(image).expect("checked above");
        img.state = ImageState::Approved;
        img.approver = Some(approver.to_owned());
        let out = img.clone();
        self.log(approver, Action::ImageApprove, image, detail([("project", project)]));
        Ok(out)
    }

    fn check_deployable(&self, operator: &str, image: &str, project: &str, presented: Option<&Digest>) -> Result<()> {
        let img = self.image(image)?;
        if !(self.directory.has_role(operator, PlatformRole::Operator) || self.directory.is_admin(operator)) {
            return Err(BrokerError::unauthorized(operator, "deploy images"));
        }
        if img.state != ImageState::Approved {
            return Err(BrokerError::NotApproved(image.to_owned()));
        }
        if img.project != project {
            return Err(BrokerError::ProjectMismatch {
                image: image.to_owned(),
                expected: img.project.clone(),
                actual: project.to_owned(),
            });
        }
        let recomputed = Digest::of(img.payload.as_bytes());
        if presented.is_some_and(|d| *d != img.digest) || recomputed != img.digest {
            return Err(BrokerError::DigestMismatch(image.to_owned()));
        }
        Ok(())
    }

    fn deploy_inner(&mut self, operator: &str, image: &str) -> Result<DeployedInstance> {
        let img = self.image(image)?;
        let project = img.project.clone();
        let digest = img.digest;
        let zone = self.project_ref(&project)?.zone;
        let size = self.config.instance_vm;
        let vm = self.provision_inner(&project, zone, size.cpu, size.ram_gb, false, "deployment")?;
        let id = self.ids.next("inst", 4);
        let inst = DeployedInstance {
            id: id.clone(),
            image: image.to_owned(),
            vm: vm.clone(),
            deployed_at: self.clock,
            digest_verified: true,
            retired: false,
        };
        self.pipeline.instances.insert(id.clone(), inst.clone());
        self.pipeline.images.get_mut(image).expect("checked above").state = ImageState::Deployed;
        self.log(
            operator,
            Action::Deploy,
            image,
            detail([("project", project), ("instance", id), ("vm", vm), ("digest", digest.to_hex())]),
        );
        Ok(inst)
    }

    pub fn deploy_image(&mut self, operator: &str, image: &str, project: &str, presented: &Digest) -> Result<DeployedInstance> {
        self.check_deployable(operator, image, project, Some(presented))?;
        self.deploy_inner(operator, image)
    }

    /// Replaces a live instance with one running an independently approved image.
    pub fn update_deployment(&mut self, operator: &str, instance: &str, new_image: &str) -> Result<DeployedInstance> {
        let old = self.instance(instance)?;
        if old.retired {
            return Err(BrokerError::UnknownInstance(instance.to_owned()));
        }
        let project = self.image(&old.image)?.project.clone();
        let old_vm = old.vm.clone();
        self.check_deployable(operator, new_image, &project, None)?;
        let inst = self.deploy_inner(operator, new_image)?;
        self.retire_instance(operator, instance, &old_vm, "updated");
        Ok(inst)
    }

    fn retire_instance(&mut self, actor: &str, instance: &str, vm: &str, cause: &str) {
        let inst = self.pipeline.instances.get_mut(instance).expect("known instance");
        if inst.retired {
            return;
        }
        inst.retired = true;
        let image = inst.image.clone();
        let project = self.pipeline.images[&image].project.clone();
        self.log(actor, Action::Retire, instance, detail([("project", project), ("image", image), ("cause", cause.to_owned())]));
        if self.enclave.vms.get(vm).is_some_and(|v| v.state != VmState::Destroyed) {
            let _ = self.destroy_inner(vm, "instance-retired");
        }
    }

    /// Marks instances on a destroyed VM as retired.
    pub(crate) fn retire_instances_on(&mut self, vm: &str) {
        for inst in self.pipeline.instances.values_mut().filter(|i| i.vm == vm) {
            inst.retired = true;
        }
    }

    /// Administrative kill switch: any state goes to Revoked and live instances
    /// are torn down.
    pub fn revoke_image(&mut self, actor: &str, image: &str) -> Result<ContainerImage> {
        let img = self.image(image)?;
        if !self.directory.is_admin(actor) {
            return Err(BrokerError::unauthorized(actor, "revoke images"));
        }
        if img.state == ImageState::Revoked {
            return Err(BrokerError::WrongState { image: image.to_owned(), state: img.state.to_string() });
        }
        let project = img.project.clone();
        self.pipeline.images.get_mut(image).expect("checked above").state = ImageState::Revoked;
        self.log(actor, Action::ImageRevoke, image, detail([("project", project)]));
        let live: Vec<(String, String)> = self
            .pipeline
            .instances
            .values()
            .filter(|i| i.image == image && !i.retired)
            .map(|i| (i.id.clone(), i.vm.clone()))
            .collect();
        for (id, vm) in live {
            self.retire_instance(actor, &id, &vm, "image-revoked");
        }
        Ok(self.pipeline.images[image].clone())
    }
}
